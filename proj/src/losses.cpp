#include "vprda/losses.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <stdexcept>

#include "vprda/kernels.hpp"

namespace vprda::losses {

Var triplet_loss(const Var& query, std::span<const Var> positives, std::span<const Var> negatives, double margin) {
  if (positives.empty()) throw std::invalid_argument("triplet_loss: tuple has no positives");
  if (negatives.empty()) throw std::invalid_argument("triplet_loss: tuple has no negatives");
  auto sq_dist = [&](const Var& other) {
    if (other.value().size() != query.value().size())
      throw DimensionError("triplet_loss: embedding lengths differ");
    return ops::sum_squares(ops::sub(query, other));
  };
  Var best = sq_dist(positives[0]);
  for (std::size_t i = 1; i < positives.size(); ++i) {
    Var d = sq_dist(positives[i]);
    if (std::isnan(d.item()) || d.item() < best.item()) best = d;
  }
  Var total;
  for (const auto& n : negatives) {
    Var hinge = ops::relu(ops::add_scalar(ops::sub(best, sq_dist(n)), margin));
    total = total ? ops::add(total, hinge) : hinge;
  }
  return total;
}

double triplet_loss(const TripletTuple& t) {
  std::vector<Var> pos, neg;
  for (const auto& p : t.positives) pos.push_back(leaf(p));
  for (const auto& n : t.negatives) neg.push_back(leaf(n));
  return triplet_loss(leaf(t.query), pos, neg, t.margin).item();
}

void MmdConfig::validate() const {
  if (bandwidths.empty() || bandwidths.size() != weights.size())
    throw std::invalid_argument("mmd: need one weight per bandwidth");
  for (double b : bandwidths)
    if (!(b > 0.0) || !std::isfinite(b)) throw std::invalid_argument("mmd: bandwidths must be positive");
  const double s = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("mmd: kernel weights must sum to 1");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("mmd: alpha must lie in [0, 1]");
}

namespace {

// Mean of the kernel mix over all pairs of rows of x and y, optionally
// skipping i == j. Passing the same Var twice gives the within-set term.
Var kernel_mean(const Var& x, const Var& y, const MmdConfig& cfg, bool skip_diagonal) {
  const std::size_t n = rows_of(x.value()), m = rows_of(y.value()), d = cols_of(x.value());
  if (cols_of(y.value()) != d) throw DimensionError("mk_mmd: descriptor dimensions differ");
  const double pairs = skip_diagonal ? static_cast<double>(n * (m - 1)) : static_cast<double>(n * m);
  const kernels::GaussianMix mix{cfg.bandwidths, cfg.weights};
  const double total = kernels::gaussian_pair_sum(x.value().data(), y.value().data(), n, m, d, mix, skip_diagonal,
                                                  {}, {}, 0.0);
  std::vector<double> bw = cfg.bandwidths, wt = cfg.weights;
  return make_node(Tensor::scalar(total / pairs), {x, y},
                   [n, m, d, pairs, skip_diagonal, bw = std::move(bw), wt = std::move(wt)](Node& self) {
                     const kernels::GaussianMix mix{bw, wt};
                     const double g = self.grad[0] / pairs;
                     Tensor gx({n, d}), gy({m, d});
                     kernels::gaussian_pair_sum(self.parents[0].value().data(), self.parents[1].value().data(), n, m,
                                                d, mix, skip_diagonal, gx.data(), gy.data(), g);
                     auto& px = self.parents[0].node()->grad_buffer();
                     for (std::size_t i = 0; i < px.size(); ++i) px[i] += gx[i];
                     auto& py = self.parents[1].node()->grad_buffer();
                     for (std::size_t i = 0; i < py.size(); ++i) py[i] += gy[i];
                   });
}

}  // namespace

Var mk_mmd(const Var& xs, const Var& xt, const MmdConfig& cfg) {
  cfg.validate();
  const bool unbiased = cfg.estimator == Estimator::unbiased;
  const std::size_t ns = rows_of(xs.value()), nt = rows_of(xt.value());
  if (ns == 0 || nt == 0) throw std::invalid_argument("mk_mmd: empty sample");
  if (unbiased && (ns < 2 || nt < 2)) throw std::invalid_argument("mk_mmd: unbiased estimator needs >= 2 samples per domain");
  const Var ss = kernel_mean(xs, xs, cfg, unbiased);
  const Var tt = kernel_mean(xt, xt, cfg, unbiased);
  const Var st = kernel_mean(xs, xt, cfg, false);
  return ops::sub(ops::add(ss, tt), ops::scale(st, 2.0));
}

double mk_mmd(const Tensor& xs, const Tensor& xt, const MmdConfig& cfg) { return mk_mmd(leaf(xs), leaf(xt), cfg).item(); }

Bandwidths median_bandwidths(const Tensor& x) {
  const std::size_t n = rows_of(x), d = cols_of(x);
  if (n < 2) throw std::invalid_argument("median_bandwidths: need at least 2 samples");
  std::vector<double> sq(n * n);
  kernels::pairwise_sq_dist(x.data(), x.data(), sq, n, n, d);
  std::vector<double> dist;
  dist.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) dist.push_back(std::sqrt(sq[i * n + j]));
  const std::size_t mid = dist.size() / 2;
  std::nth_element(dist.begin(), dist.begin() + static_cast<long>(mid), dist.end());
  double median = dist[mid];
  if (dist.size() % 2 == 0) {
    const double lower = *std::max_element(dist.begin(), dist.begin() + static_cast<long>(mid));
    median = 0.5 * (lower + median);
  }
  Bandwidths out;
  out.median = median;
  if (!(median > 0.0)) {
    std::cerr << "warning: all descriptors coincide; using bandwidth scale 1.0\n";
    out.degenerate = true;
    median = 1.0;
  }
  for (double f : kBandwidthMultipliers) out.values.push_back(f * median);
  return out;
}

Var combined_loss(const Var& ranking, const Var& mmd, double alpha) { return ops::add(ranking, ops::scale(mmd, alpha)); }

double combined_loss(double ranking, double mmd, double alpha) { return ranking + alpha * mmd; }

}  // namespace vprda::losses
