#include "vprda/head.hpp"

#include <omp.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "vprda/geo.hpp"
#include "vprda/kernels.hpp"

namespace vprda::head {

std::string to_string(Mode m) {
  switch (m) {
    case Mode::vanilla: return "vanilla";
    case Mode::a1: return "a1";
    case Mode::a2: return "a2";
    case Mode::fused: return "fused";
  }
  return "";
}

Mode parse_mode(const std::string& s) {
  if (s == "vanilla") return Mode::vanilla;
  if (s == "a1" || s == "A1") return Mode::a1;
  if (s == "a2" || s == "A2") return Mode::a2;
  if (s == "fused") return Mode::fused;
  throw std::invalid_argument("unknown aggregation mode '" + s + "'");
}

std::string to_string(Normalization n) { return n == Normalization::intra_global ? "intra" : "global"; }

Normalization parse_normalization(const std::string& s) {
  if (s == "intra" || s == "intra_global") return Normalization::intra_global;
  if (s == "global") return Normalization::global;
  throw std::invalid_argument("unknown normalization '" + s + "'");
}

std::array<Tensor*, HeadParams::kTensorCount> HeadParams::tensors() {
  return {&adapter_w, &adapter_b, &attn_w, &attn_b, &assign_w, &assign_b, &centers};
}

std::array<const Tensor*, HeadParams::kTensorCount> HeadParams::tensors() const {
  return {&adapter_w, &adapter_b, &attn_w, &attn_b, &assign_w, &assign_b, &centers};
}

void HeadParams::validate() const {
  const auto& aw = adapter_w.shape();
  if (aw.size() != 4 || aw[0] != 3 || aw[1] != 3) throw DimensionError("adapter_w must be 3x3xDinxD, got " + shape_str(aw));
  const std::size_t d = aw[3];
  if (centers.rank() != 2 || centers.dim(1) != d || centers.dim(0) == 0)
    throw DimensionError("centers must be KxD with K >= 1, got " + shape_str(centers.shape()));
  const std::size_t k = centers.dim(0);
  if (adapter_b.shape() != Shape{d}) throw DimensionError("adapter_b must be [D]");
  if (attn_w.shape() != Shape{d, 1}) throw DimensionError("attn_w must be Dx1");
  if (attn_b.shape() != Shape{1}) throw DimensionError("attn_b must be [1]");
  if (assign_w.shape() != Shape{d, k}) throw DimensionError("assign_w must be DxK");
  if (assign_b.shape() != Shape{k}) throw DimensionError("assign_b must be [K]");
  for (const Tensor* t : tensors())
    if (!t->all_finite()) throw std::invalid_argument("head parameters contain non-finite values");
}

HeadParams init_params(std::size_t din, std::size_t dim, std::size_t k, Mode mode, Normalization norm,
                       std::mt19937_64& rng) {
  if (k == 0) throw std::invalid_argument("cluster count must be >= 1");
  if (din != dim) throw std::invalid_argument("identity adapter init requires Din == D");
  HeadParams p;
  p.mode = mode;
  p.norm = norm;
  p.adapter_w = Tensor({3, 3, din, dim});
  std::normal_distribution<double> small(0.0, 1e-2);
  for (auto& v : p.adapter_w.vec()) v = small(rng);
  const std::size_t center_tap = (1 * 3 + 1) * din * dim;
  for (std::size_t c = 0; c < din; ++c) p.adapter_w[center_tap + c * dim + c] += 1.0;
  p.adapter_b = Tensor({dim});
  p.attn_w = Tensor({dim, 1});
  for (auto& v : p.attn_w.vec()) v = small(rng);
  p.attn_b = Tensor({1});
  p.assign_w = Tensor({dim, k});
  p.assign_b = Tensor({k});
  p.centers = Tensor({k, dim});
  return p;
}

Tensor kmeans(const Tensor& descriptors, std::size_t k, std::size_t iterations, std::uint64_t seed) {
  const std::size_t m = rows_of(descriptors), d = cols_of(descriptors);
  if (k == 0 || m < k) throw std::invalid_argument("kmeans: need at least k descriptors");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> perm(m);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor centers({k, d});
  for (std::size_t c = 0; c < k; ++c)
    std::copy_n(descriptors.data().begin() + static_cast<long>(perm[c] * d), d,
                centers.data().begin() + static_cast<long>(c * d));

  std::vector<double> dist(m * k);
  std::vector<std::size_t> label(m);
  for (std::size_t it = 0; it < iterations; ++it) {
    kernels::pairwise_sq_dist(descriptors.data(), centers.data(), dist, m, k, d);
    for (std::size_t i = 0; i < m; ++i) {
      const double* row = dist.data() + i * k;
      label[i] = static_cast<std::size_t>(std::min_element(row, row + k) - row);
    }
    Tensor sums({k, d});
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < m; ++i) {
      ++counts[label[i]];
      for (std::size_t j = 0; j < d; ++j) sums[label[i] * d + j] += descriptors[i * d + j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        // Empty cluster: move it onto the point farthest from its own center.
        std::size_t far = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < m; ++i) {
          if (dist[i * k + label[i]] > best) {
            best = dist[i * k + label[i]];
            far = i;
          }
        }
        for (std::size_t j = 0; j < d; ++j) centers[c * d + j] = descriptors[far * d + j];
        dist[far * k + label[far]] = 0.0;
        continue;
      }
      for (std::size_t j = 0; j < d; ++j) centers[c * d + j] = sums[c * d + j] / static_cast<double>(counts[c]);
    }
  }
  return centers;
}

void init_clusters(HeadParams& p, const Tensor& descriptors, std::uint64_t seed, std::size_t iterations, double beta) {
  const std::size_t k = p.clusters(), d = p.dim();
  p.centers = kmeans(descriptors, k, iterations, seed);
  for (std::size_t c = 0; c < k; ++c) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double v = p.centers[c * d + j];
      p.assign_w[j * k + c] = 2.0 * beta * v;
      sq += v * v;
    }
    p.assign_b[c] = -beta * sq;
  }
}

HeadVars::HeadVars(const HeadParams& p)
    : adapter_w(leaf(p.adapter_w)),
      adapter_b(leaf(p.adapter_b)),
      attn_w(leaf(p.attn_w)),
      attn_b(leaf(p.attn_b)),
      assign_w(leaf(p.assign_w)),
      assign_b(leaf(p.assign_b)),
      centers(leaf(p.centers)),
      mode(p.mode),
      norm(p.norm) {}

// ------------------------------------------------------------ graph ops

namespace {

Var as_descriptors(const Var& fm) {
  const auto& s = fm.shape();
  if (s.size() != 3) throw DimensionError("expected H x W x D feature map, got " + shape_str(s));
  return ops::reshape(fm, {s[0] * s[1], s[2]});
}

}  // namespace

Var adapter(const Var& fm, const HeadVars& hv) { return ops::relu(ops::conv2d_3x3(fm, hv.adapter_w, hv.adapter_b)); }

Var attention(const Var& fm, const HeadVars& hv) {
  return ops::softplus(ops::conv2d_1x1(ops::relu(fm), hv.attn_w, hv.attn_b));
}

Var soft_assign(const Var& x, const HeadVars& hv) {
  return ops::softmax(ops::add_row_bias(ops::matmul(x, hv.assign_w), hv.assign_b));
}

Var vlad_matrix(const Var& x, const Var& a, const Var& centers) {
  if (rows_of(x.value()) != rows_of(a.value()))
    throw DimensionError("vlad: " + shape_str(x.shape()) + " descriptors vs " + shape_str(a.shape()) + " assignments");
  // sum_i a_ik x_i - (sum_i a_ik) c_k
  return ops::sub(ops::matmul(ops::transpose(a), x), ops::scale_rows(centers, ops::col_sum(a)));
}

Var vlad_a1_matrix(const Var& x, const Var& w, const HeadVars& hv) {
  const Var a = soft_assign(x, hv);
  return vlad_matrix(x, ops::scale_rows(a, w), hv.centers);
}

Var vlad_a2_matrix(const Var& x, const Var& w, const HeadVars& hv) {
  const Var xw = ops::scale_rows(x, w);
  const Var a = soft_assign(xw, hv);
  return vlad_matrix(xw, ops::scale_rows(a, w), hv.centers);
}

Var vlad_fused_matrix(const Var& x, const Var& w, const HeadVars& hv) {
  return ops::add(vlad_a1_matrix(x, w, hv), vlad_a2_matrix(x, w, hv));
}

Var normalize(const Var& v, Normalization norm) {
  const std::size_t n = v.value().size();
  const Var rows = norm == Normalization::intra_global ? ops::l2_normalize(v) : v;
  return ops::reshape(ops::l2_normalize(ops::reshape(rows, {1, n})), {n});
}

Forward embed_graph(const Var& fm_in, const HeadVars& hv) {
  Forward f;
  f.adapted = adapter(fm_in, hv);
  const Var x = as_descriptors(f.adapted);
  if (hv.mode == Mode::vanilla) {
    f.v = vlad_matrix(x, soft_assign(x, hv), hv.centers);
  } else {
    const Var att = attention(f.adapted, hv);
    f.attention = ops::reshape(att, {att.value().size()});
    switch (hv.mode) {
      case Mode::a1: f.v = vlad_a1_matrix(x, f.attention, hv); break;
      case Mode::a2: f.v = vlad_a2_matrix(x, f.attention, hv); break;
      default: f.v = vlad_fused_matrix(x, f.attention, hv); break;
    }
  }
  f.embedding = normalize(f.v, hv.norm);
  return f;
}

// ------------------------------------------------------------ value ops

namespace {

VladDescriptor finish(const Var& v, Normalization norm) { return {v.value(), normalize(v, norm).value()}; }

void check_weights(const Tensor& x, const Tensor& w) {
  if (w.size() != rows_of(x)) throw DimensionError("attention weights: " + std::to_string(w.size()) +
                                                   " for " + std::to_string(rows_of(x)) + " descriptors");
}

}  // namespace

Tensor adapter(const Tensor& fm_in, const HeadParams& p) { return adapter(leaf(fm_in), HeadVars(p)).value(); }

Tensor attention(const Tensor& fm, const HeadParams& p) {
  const Tensor s = attention(leaf(fm), HeadVars(p)).value();
  return s.reshaped({fm.dim(0), fm.dim(1)});
}

Tensor soft_assign(const Tensor& x, const HeadParams& p) { return soft_assign(leaf(x), HeadVars(p)).value(); }

VladDescriptor vlad(const Tensor& x, const Tensor& a, const HeadParams& p) {
  return finish(vlad_matrix(leaf(x), leaf(a), leaf(p.centers)), p.norm);
}

VladDescriptor vlad_a1(const Tensor& x, const Tensor& w, const HeadParams& p) {
  check_weights(x, w);
  return finish(vlad_a1_matrix(leaf(x), leaf(w.reshaped({w.size()})), HeadVars(p)), p.norm);
}

VladDescriptor vlad_a2(const Tensor& x, const Tensor& w, const HeadParams& p) {
  check_weights(x, w);
  return finish(vlad_a2_matrix(leaf(x), leaf(w.reshaped({w.size()})), HeadVars(p)), p.norm);
}

VladDescriptor vlad_fused(const Tensor& x, const Tensor& w, const HeadParams& p) {
  check_weights(x, w);
  return finish(vlad_fused_matrix(leaf(x), leaf(w.reshaped({w.size()})), HeadVars(p)), p.norm);
}

VladDescriptor embed(const Tensor& fm_in, const HeadParams& p) {
  const Forward f = embed_graph(leaf(fm_in), HeadVars(p));
  return {f.v.value(), f.embedding.value()};
}

std::vector<Tensor> embed_batch(const std::vector<const Tensor*>& maps, const HeadParams& p) {
  std::vector<Tensor> out(maps.size());
  const long n = static_cast<long>(maps.size());
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < n; ++i) {
    const auto iu = static_cast<std::size_t>(i);
    out[iu] = embed_graph(leaf(*maps[iu]), HeadVars(p)).embedding.value();
  }
  return out;
}

std::vector<std::uint8_t> heatmap_pixels(const Tensor& scores) {
  std::vector<std::uint8_t> px(scores.size(), 128);
  if (scores.empty()) return px;
  const auto [lo, hi] = std::minmax_element(scores.data().begin(), scores.data().end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return px;
  for (std::size_t i = 0; i < scores.size(); ++i)
    px[i] = static_cast<std::uint8_t>(std::lround(255.0 * (scores[i] - *lo) / range));
  return px;
}

void export_heatmap(const Tensor& fm_in, const HeadParams& p, const std::filesystem::path& path) {
  const Tensor scores = attention(adapter(fm_in, p), p);
  const auto px = heatmap_pixels(scores);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw geo::DataError("cannot open " + path.string() + " for writing");
  os << "P5\n" << scores.dim(1) << ' ' << scores.dim(0) << "\n255\n";
  os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!os) throw geo::DataError("write failed: " + path.string());
}

// ------------------------------------------------------------ checkpoint

namespace {

constexpr char kCkptMagic[8] = {'V', 'P', 'R', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

template <typename U>
void put_le(std::ostream& os, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U get_le(std::istream& is, const std::filesystem::path& path) {
  unsigned char b[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(U))) throw geo::DataError(path.string() + ": truncated checkpoint");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b[i]) << (8 * i));
  return v;
}

}  // namespace

void save_checkpoint(const HeadParams& p, const std::filesystem::path& path) {
  p.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw geo::DataError("cannot open " + path.string() + " for writing");
  os.write(kCkptMagic, sizeof kCkptMagic);
  put_le<std::uint32_t>(os, kCkptVersion);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.mode));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.norm));
  put_le<std::uint32_t>(os, HeadParams::kTensorCount);
  for (const Tensor* t : p.tensors()) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t->rank()));
    for (auto d : t->shape()) put_le<std::uint64_t>(os, d);
    for (double v : t->data()) put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw geo::DataError("write failed: " + path.string());
}

HeadParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw geo::DataError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kCkptMagic))
    throw geo::DataError(path.string() + ": not a checkpoint file");
  if (auto v = get_le<std::uint32_t>(is, path); v != kCkptVersion)
    throw geo::DataError(path.string() + ": unsupported checkpoint version " + std::to_string(v));
  HeadParams p;
  const auto mode = get_le<std::uint32_t>(is, path);
  const auto norm = get_le<std::uint32_t>(is, path);
  if (mode > 3 || norm > 1) throw geo::DataError(path.string() + ": bad mode/normalization tag");
  p.mode = static_cast<Mode>(mode);
  p.norm = static_cast<Normalization>(norm);
  if (get_le<std::uint32_t>(is, path) != HeadParams::kTensorCount)
    throw geo::DataError(path.string() + ": unexpected tensor count");
  for (Tensor* t : p.tensors()) {
    const auto rank = get_le<std::uint32_t>(is, path);
    if (rank > 8) throw geo::DataError(path.string() + ": bad tensor rank");
    Shape shape(rank);
    for (auto& d : shape) d = get_le<std::uint64_t>(is, path);
    const std::size_t n = shape_size(shape);
    if (n > (std::size_t{1} << 32)) throw geo::DataError(path.string() + ": tensor too large");
    std::vector<double> data(n);
    for (auto& v : data) v = std::bit_cast<double>(get_le<std::uint64_t>(is, path));
    *t = Tensor(std::move(shape), std::move(data));
  }
  try {
    p.validate();
  } catch (const std::exception& e) {
    throw geo::DataError(path.string() + ": " + e.what());
  }
  return p;
}

}  // namespace vprda::head
