#pragma once

// Trainable descriptor head mapping a backbone feature map to a retrieval
// embedding through attention-aware VLAD aggregation.

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "vprda/autodiff.hpp"
#include "vprda/tensor.hpp"

namespace vprda::head {

/// How attention enters the aggregation.
///   vanilla: residuals weighted by soft assignment only
///   a1:      residuals additionally weighted by attention after assignment
///   a2:      descriptors scaled by attention before assignment and residuals
///   fused:   a1 + a2
enum class Mode { vanilla, a1, a2, fused };

/// intra_global: L2 per cluster row, then L2 of the flattened vector.
enum class Normalization { intra_global, global };

std::string to_string(Mode m);
Mode parse_mode(const std::string& s);
std::string to_string(Normalization n);
Normalization parse_normalization(const std::string& s);

struct HeadParams {
  Tensor adapter_w;  // 3 x 3 x Din x D
  Tensor adapter_b;  // D
  Tensor attn_w;     // D x 1
  Tensor attn_b;     // 1
  Tensor assign_w;   // D x K
  Tensor assign_b;   // K
  Tensor centers;    // K x D
  Mode mode = Mode::fused;
  Normalization norm = Normalization::intra_global;

  std::size_t input_dim() const { return adapter_w.dim(2); }
  std::size_t dim() const { return adapter_w.dim(3); }
  std::size_t clusters() const { return centers.dim(0); }
  std::size_t embedding_dim() const { return clusters() * dim(); }

  /// Throws DimensionError on inconsistent shapes, std::invalid_argument on non-finite values.
  void validate() const;

  static constexpr std::size_t kTensorCount = 7;
  std::array<Tensor*, kTensorCount> tensors();
  std::array<const Tensor*, kTensorCount> tensors() const;
};

/// Default initialization before k-means. The adapter is a center-tap identity
/// plus small noise (requires din == dim); attention weights are ~ N(0, 1e-2).
/// Assignment and centers are zero until init_clusters() runs.
HeadParams init_params(std::size_t din, std::size_t dim, std::size_t k, Mode mode, Normalization norm,
                       std::mt19937_64& rng);

/// Seeded Lloyd k-means. descriptors: M x D with M >= k.
Tensor kmeans(const Tensor& descriptors, std::size_t k, std::size_t iterations, std::uint64_t seed);

inline constexpr double kAssignSharpness = 10.0;

/// centers <- k-means(descriptors); logit_k(x) = 2 beta c_k.x - beta ||c_k||^2.
void init_clusters(HeadParams& params, const Tensor& descriptors, std::uint64_t seed, std::size_t iterations = 20,
                   double beta = kAssignSharpness);

/// Graph leaves for every parameter tensor.
struct HeadVars {
  Var adapter_w, adapter_b, attn_w, attn_b, assign_w, assign_b, centers;
  Mode mode = Mode::fused;
  Normalization norm = Normalization::intra_global;

  explicit HeadVars(const HeadParams& p);
  std::array<Var, HeadParams::kTensorCount> all() const {
    return {adapter_w, adapter_b, attn_w, attn_b, assign_w, assign_b, centers};
  }
};

// ---- graph-level operations (differentiable)

/// 3x3 same-padding conv + ReLU: H x W x Din -> H x W x D.
Var adapter(const Var& fm, const HeadVars& hv);
/// softplus(conv1x1(relu(fm))) -> H x W x 1.
Var attention(const Var& fm, const HeadVars& hv);
/// softmax_k(x W + b): N x D -> N x K.
Var soft_assign(const Var& x, const HeadVars& hv);
/// V(k, j) = sum_i a_ik (x_ij - c_kj): K x D.
Var vlad_matrix(const Var& x, const Var& a, const Var& centers);
Var vlad_a1_matrix(const Var& x, const Var& w, const HeadVars& hv);
Var vlad_a2_matrix(const Var& x, const Var& w, const HeadVars& hv);
Var vlad_fused_matrix(const Var& x, const Var& w, const HeadVars& hv);
/// Flattened, normalized embedding of a K x D matrix.
Var normalize(const Var& v, Normalization norm);

struct Forward {
  Var adapted;    // H x W x D
  Var attention;  // N (empty for vanilla)
  Var v;          // K x D before normalization
  Var embedding;  // K*D
};

Forward embed_graph(const Var& fm_in, const HeadVars& hv);

// ---- value-level operations

struct VladDescriptor {
  Tensor v;          // K x D
  Tensor embedding;  // K*D, unit norm unless v == 0
};

Tensor adapter(const Tensor& fm_in, const HeadParams& p);
/// H x W map of strictly positive scores.
Tensor attention(const Tensor& fm, const HeadParams& p);
Tensor soft_assign(const Tensor& x, const HeadParams& p);
VladDescriptor vlad(const Tensor& x, const Tensor& a, const HeadParams& p);
VladDescriptor vlad_a1(const Tensor& x, const Tensor& w, const HeadParams& p);
VladDescriptor vlad_a2(const Tensor& x, const Tensor& w, const HeadParams& p);
VladDescriptor vlad_fused(const Tensor& x, const Tensor& w, const HeadParams& p);
VladDescriptor embed(const Tensor& fm_in, const HeadParams& p);

/// Embeds many maps; parallel over maps, output order matches input order.
std::vector<Tensor> embed_batch(const std::vector<const Tensor*>& maps, const HeadParams& p);

/// Attention map of the adapted input, min-max scaled to 8-bit binary PGM.
/// A constant map is written as all-128.
void export_heatmap(const Tensor& fm_in, const HeadParams& p, const std::filesystem::path& path);
std::vector<std::uint8_t> heatmap_pixels(const Tensor& scores);

// ---- checkpoint: "VPRDCKPT", u32 version, u32 mode, u32 norm, u32 count,
// then per tensor u32 rank, u64 dims, f64 values (all little-endian).

void save_checkpoint(const HeadParams& p, const std::filesystem::path& path);
HeadParams load_checkpoint(const std::filesystem::path& path);

}  // namespace vprda::head
