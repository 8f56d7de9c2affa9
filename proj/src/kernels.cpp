#include "vprda/kernels.hpp"

#include <omp.h>

#include <cmath>
#include <vector>

namespace vprda::kernels {
namespace {

// Row-level bodies shared by both variants so the operation order is identical.

inline void gemm_row(const double* a, const double* b, double* c, std::size_t i, std::size_t k,
                     std::size_t n) {
  double* ci = c + i * n;
  for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
  const double* ai = a + i * k;
  for (std::size_t p = 0; p < k; ++p) {
    const double av = ai[p];
    if (av == 0.0) continue;
    const double* bp = b + p * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
  }
}

inline void gemm_tn_row(const double* a, const double* b, double* c, std::size_t r, std::size_t m,
                        std::size_t k, std::size_t n) {
  double* cr = c + r * n;
  for (std::size_t i = 0; i < m; ++i) {
    const double av = a[i * k + r];
    if (av == 0.0) continue;
    const double* bi = b + i * n;
    for (std::size_t j = 0; j < n; ++j) cr[j] += av * bi[j];
  }
}

inline void gemm_nt_row(const double* a, const double* b, double* c, std::size_t i, std::size_t n,
                        std::size_t k) {
  const double* ai = a + i * n;
  double* ci = c + i * k;
  for (std::size_t r = 0; r < k; ++r) {
    const double* br = b + r * n;
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += ai[j] * br[j];
    ci[r] += s;
  }
}

inline void conv3x3_pixel(const double* in, const double* w, const double* bias, double* out,
                          std::size_t y, std::size_t x, std::size_t h, std::size_t wd,
                          std::size_t cin, std::size_t cout) {
  double* o = out + (y * wd + x) * cout;
  for (std::size_t co = 0; co < cout; ++co) o[co] = bias[co];
  for (int dy = -1; dy <= 1; ++dy) {
    const long yy = static_cast<long>(y) + dy;
    if (yy < 0 || yy >= static_cast<long>(h)) continue;
    for (int dx = -1; dx <= 1; ++dx) {
      const long xx = static_cast<long>(x) + dx;
      if (xx < 0 || xx >= static_cast<long>(wd)) continue;
      const double* src = in + (static_cast<std::size_t>(yy) * wd + static_cast<std::size_t>(xx)) * cin;
      const double* tap = w + (static_cast<std::size_t>(dy + 1) * 3 + static_cast<std::size_t>(dx + 1)) * cin * cout;
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double v = src[ci];
        if (v == 0.0) continue;
        const double* wr = tap + ci * cout;
        for (std::size_t co = 0; co < cout; ++co) o[co] += v * wr[co];
      }
    }
  }
}

inline double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t t = 0; t < d; ++t) {
    const double e = a[t] - b[t];
    s += e * e;
  }
  return s;
}

// Sum of the kernel mix at squared distance d2, and the matching derivative
// factor sum_u w_u k_u / sigma_u^2.
inline void mix_eval(double d2, const GaussianMix& mix, double& value, double& slope) {
  value = 0.0;
  slope = 0.0;
  for (std::size_t u = 0; u < mix.bandwidths.size(); ++u) {
    const double s2 = mix.bandwidths[u] * mix.bandwidths[u];
    const double k = mix.weights[u] * std::exp(-d2 / (2.0 * s2));
    value += k;
    slope += k / s2;
  }
}

inline double gaussian_row(const double* x, const double* y, std::size_t i, std::size_t m,
                           std::size_t d, const GaussianMix& mix, bool skip_diagonal, double* gxi,
                           double grad_scale) {
  const double* xi = x + i * d;
  double row = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    if (skip_diagonal && i == j) continue;
    const double* yj = y + j * d;
    double value, slope;
    mix_eval(sq_dist(xi, yj, d), mix, value, slope);
    row += value;
    if (gxi) {
      for (std::size_t t = 0; t < d; ++t) gxi[t] -= grad_scale * slope * (xi[t] - yj[t]);
    }
  }
  return row;
}

inline void gaussian_col_grad(const double* x, const double* y, std::size_t j, std::size_t n,
                              std::size_t d, const GaussianMix& mix, bool skip_diagonal, double* gyj,
                              double grad_scale) {
  const double* yj = y + j * d;
  for (std::size_t i = 0; i < n; ++i) {
    if (skip_diagonal && i == j) continue;
    const double* xi = x + i * d;
    double value, slope;
    mix_eval(sq_dist(xi, yj, d), mix, value, slope);
    for (std::size_t t = 0; t < d; ++t) gyj[t] += grad_scale * slope * (xi[t] - yj[t]);
  }
}

template <bool Parallel>
double gaussian_pair_sum_impl(std::span<const double> x, std::span<const double> y, std::size_t n,
                              std::size_t m, std::size_t d, GaussianMix mix, bool skip_diagonal,
                              std::span<double> gx, std::span<double> gy, double grad_scale) {
  std::vector<double> rows(n, 0.0);
  const double* xp = x.data();
  const double* yp = y.data();
  double* gxp = gx.empty() ? nullptr : gx.data();
  const long nl = static_cast<long>(n);
#pragma omp parallel for schedule(static) if (Parallel)
  for (long i = 0; i < nl; ++i) {
    const auto iu = static_cast<std::size_t>(i);
    rows[iu] = gaussian_row(xp, yp, iu, m, d, mix, skip_diagonal, gxp ? gxp + iu * d : nullptr, grad_scale);
  }
  if (!gy.empty()) {
    double* gyp = gy.data();
    const long ml = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (Parallel)
    for (long j = 0; j < ml; ++j) {
      const auto ju = static_cast<std::size_t>(j);
      gaussian_col_grad(xp, yp, ju, n, d, mix, skip_diagonal, gyp + ju * d, grad_scale);
    }
  }
  double total = 0.0;
  for (double r : rows) total += r;
  return total;
}

}  // namespace

namespace serial {

void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
          std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) gemm_row(a.data(), b.data(), c.data(), i, k, n);
}

void gemm_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t r = 0; r < k; ++r) gemm_tn_row(a.data(), b.data(), c.data(), r, m, k, n);
}

void gemm_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) gemm_nt_row(a.data(), b.data(), c.data(), i, n, k);
}

void conv3x3(std::span<const double> in, std::span<const double> w, std::span<const double> bias,
             std::span<double> out, std::size_t h, std::size_t wd, std::size_t cin, std::size_t cout) {
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < wd; ++x)
      conv3x3_pixel(in.data(), w.data(), bias.data(), out.data(), y, x, h, wd, cin, cout);
}

void pairwise_sq_dist(std::span<const double> x, std::span<const double> y, std::span<double> out,
                      std::size_t n, std::size_t m, std::size_t d) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = sq_dist(x.data() + i * d, y.data() + j * d, d);
}

double gaussian_pair_sum(std::span<const double> x, std::span<const double> y, std::size_t n,
                         std::size_t m, std::size_t d, GaussianMix mix, bool skip_diagonal,
                         std::span<double> gx, std::span<double> gy, double grad_scale) {
  return gaussian_pair_sum_impl<false>(x, y, n, m, d, mix, skip_diagonal, gx, gy, grad_scale);
}

}  // namespace serial

namespace omp {

void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
          std::size_t k, std::size_t n) {
  const long ml = static_cast<long>(m);
#pragma omp parallel for schedule(static)
  for (long i = 0; i < ml; ++i) gemm_row(a.data(), b.data(), c.data(), static_cast<std::size_t>(i), k, n);
}

void gemm_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t k, std::size_t n) {
  const long kl = static_cast<long>(k);
#pragma omp parallel for schedule(static)
  for (long r = 0; r < kl; ++r) gemm_tn_row(a.data(), b.data(), c.data(), static_cast<std::size_t>(r), m, k, n);
}

void gemm_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t n, std::size_t k) {
  const long ml = static_cast<long>(m);
#pragma omp parallel for schedule(static)
  for (long i = 0; i < ml; ++i) gemm_nt_row(a.data(), b.data(), c.data(), static_cast<std::size_t>(i), n, k);
}

void conv3x3(std::span<const double> in, std::span<const double> w, std::span<const double> bias,
             std::span<double> out, std::size_t h, std::size_t wd, std::size_t cin, std::size_t cout) {
  const long pixels = static_cast<long>(h * wd);
#pragma omp parallel for schedule(static)
  for (long p = 0; p < pixels; ++p) {
    const auto pu = static_cast<std::size_t>(p);
    conv3x3_pixel(in.data(), w.data(), bias.data(), out.data(), pu / wd, pu % wd, h, wd, cin, cout);
  }
}

void pairwise_sq_dist(std::span<const double> x, std::span<const double> y, std::span<double> out,
                      std::size_t n, std::size_t m, std::size_t d) {
  const long nl = static_cast<long>(n);
#pragma omp parallel for schedule(static)
  for (long i = 0; i < nl; ++i) {
    const auto iu = static_cast<std::size_t>(i);
    for (std::size_t j = 0; j < m; ++j) out[iu * m + j] = sq_dist(x.data() + iu * d, y.data() + j * d, d);
  }
}

double gaussian_pair_sum(std::span<const double> x, std::span<const double> y, std::size_t n,
                         std::size_t m, std::size_t d, GaussianMix mix, bool skip_diagonal,
                         std::span<double> gx, std::span<double> gy, double grad_scale) {
  return gaussian_pair_sum_impl<true>(x, y, n, m, d, mix, skip_diagonal, gx, gy, grad_scale);
}

}  // namespace omp

bool use_parallel(std::size_t work) {
  return work >= kParallelThreshold && omp_get_max_threads() > 1 && !omp_in_parallel();
}

void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
          std::size_t k, std::size_t n) {
  if (use_parallel(m * k * n)) omp::gemm(a, b, c, m, k, n);
  else serial::gemm(a, b, c, m, k, n);
}

void gemm_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t k, std::size_t n) {
  if (use_parallel(m * k * n)) omp::gemm_tn_acc(a, b, c, m, k, n);
  else serial::gemm_tn_acc(a, b, c, m, k, n);
}

void gemm_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t n, std::size_t k) {
  if (use_parallel(m * k * n)) omp::gemm_nt_acc(a, b, c, m, n, k);
  else serial::gemm_nt_acc(a, b, c, m, n, k);
}

void conv3x3(std::span<const double> in, std::span<const double> w, std::span<const double> bias,
             std::span<double> out, std::size_t h, std::size_t wd, std::size_t cin, std::size_t cout) {
  if (use_parallel(9 * h * wd * cin * cout)) omp::conv3x3(in, w, bias, out, h, wd, cin, cout);
  else serial::conv3x3(in, w, bias, out, h, wd, cin, cout);
}

void pairwise_sq_dist(std::span<const double> x, std::span<const double> y, std::span<double> out,
                      std::size_t n, std::size_t m, std::size_t d) {
  if (use_parallel(n * m * d)) omp::pairwise_sq_dist(x, y, out, n, m, d);
  else serial::pairwise_sq_dist(x, y, out, n, m, d);
}

double gaussian_pair_sum(std::span<const double> x, std::span<const double> y, std::size_t n,
                         std::size_t m, std::size_t d, GaussianMix mix, bool skip_diagonal,
                         std::span<double> gx, std::span<double> gy, double grad_scale) {
  if (use_parallel(n * m * (d + mix.bandwidths.size())))
    return omp::gaussian_pair_sum(x, y, n, m, d, mix, skip_diagonal, gx, gy, grad_scale);
  return serial::gaussian_pair_sum(x, y, n, m, d, mix, skip_diagonal, gx, gy, grad_scale);
}

}  // namespace vprda::kernels
