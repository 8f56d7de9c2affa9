#pragma once

#include <span>
#include <vector>

#include "vprda/autodiff.hpp"
#include "vprda/tensor.hpp"

namespace vprda::losses {

inline constexpr double kDefaultMargin = 0.1;
inline constexpr double kDefaultAlpha = 0.99;

struct TripletTuple {
  Tensor query;
  std::vector<Tensor> positives;
  std::vector<Tensor> negatives;
  double margin = kDefaultMargin;
};

/// sum_j max(0, min_i ||q - p_i||^2 + m - ||q - n_j||^2).
/// The best positive is the lowest index among exact ties; the hinge passes
/// zero gradient at exactly zero. Throws std::invalid_argument on an empty
/// positive or negative list.
Var triplet_loss(const Var& query, std::span<const Var> positives, std::span<const Var> negatives, double margin);
double triplet_loss(const TripletTuple& t);

enum class Estimator { biased, unbiased };

struct MmdConfig {
  std::vector<double> bandwidths{0.25, 0.5, 1.0, 2.0, 4.0};
  std::vector<double> weights{0.2, 0.2, 0.2, 0.2, 0.2};
  Estimator estimator = Estimator::biased;
  double alpha = kDefaultAlpha;

  void validate() const;
};

/// Squared multi-kernel MMD between the rows of xs (Ns x D) and xt (Nt x D):
/// sum_u w_u [mean k_u(s, s') + mean k_u(t, t') - 2 mean k_u(s, t)],
/// k_u(x, y) = exp(-||x - y||^2 / (2 sigma_u^2)). The unbiased estimator
/// drops the i == j terms of the within-domain means.
Var mk_mmd(const Var& xs, const Var& xt, const MmdConfig& cfg);
double mk_mmd(const Tensor& xs, const Tensor& xt, const MmdConfig& cfg);

struct Bandwidths {
  std::vector<double> values;
  double median = 0.0;
  bool degenerate = false;  // all points coincide (median 0); values use scale 1.0
};

inline constexpr double kBandwidthMultipliers[5] = {0.25, 0.5, 1.0, 2.0, 4.0};

/// Median pairwise Euclidean distance times {1/4, 1/2, 1, 2, 4}.
Bandwidths median_bandwidths(const Tensor& x);

/// L_r + alpha * M.
Var combined_loss(const Var& ranking, const Var& mmd, double alpha);
double combined_loss(double ranking, double mmd, double alpha);

}  // namespace vprda::losses
