#pragma once

// Dense inner loops shared across the library.
//
// Every kernel has a serial reference in `kernels::serial` and an OpenMP
// version in `kernels::omp`. Both compute each output element with the same
// floating-point operation order, so their results are bit-identical; the
// unqualified entry points pick one by problem size and thread count.

#include <cstddef>
#include <span>

namespace vprda::kernels {

/// Multi-kernel Gaussian sum over all (i, j) pairs of two point sets.
struct GaussianMix {
  std::span<const double> bandwidths;  // sigma_u
  std::span<const double> weights;     // w_u
};

namespace serial {

// c[m x n] = a[m x k] * b[k x n]
void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
          std::size_t k, std::size_t n);
// c[k x n] += a[m x k]^T * b[m x n]
void gemm_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t k, std::size_t n);
// c[m x k] += a[m x n] * b[k x n]^T
void gemm_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t n, std::size_t k);

// Same-padding 3x3 convolution. in: H x W x Cin, w: 3 x 3 x Cin x Cout, out: H x W x Cout.
void conv3x3(std::span<const double> in, std::span<const double> w, std::span<const double> bias,
             std::span<double> out, std::size_t h, std::size_t wd, std::size_t cin, std::size_t cout);

// out[i * m + j] = ||x_i - y_j||^2
void pairwise_sq_dist(std::span<const double> x, std::span<const double> y, std::span<double> out,
                      std::size_t n, std::size_t m, std::size_t d);

// Sum over pairs of sum_u w_u exp(-||x_i - y_j||^2 / (2 sigma_u^2)); pairs with
// i == j are skipped when `skip_diagonal`. When gx (n x d) is non-empty it
// receives d(sum)/dx scaled by `grad_scale`, likewise gy (m x d).
double gaussian_pair_sum(std::span<const double> x, std::span<const double> y, std::size_t n,
                         std::size_t m, std::size_t d, GaussianMix mix, bool skip_diagonal,
                         std::span<double> gx, std::span<double> gy, double grad_scale);

}  // namespace serial

namespace omp {

void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
          std::size_t k, std::size_t n);
void gemm_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t k, std::size_t n);
void gemm_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t n, std::size_t k);
void conv3x3(std::span<const double> in, std::span<const double> w, std::span<const double> bias,
             std::span<double> out, std::size_t h, std::size_t wd, std::size_t cin, std::size_t cout);
void pairwise_sq_dist(std::span<const double> x, std::span<const double> y, std::span<double> out,
                      std::size_t n, std::size_t m, std::size_t d);
double gaussian_pair_sum(std::span<const double> x, std::span<const double> y, std::size_t n,
                         std::size_t m, std::size_t d, GaussianMix mix, bool skip_diagonal,
                         std::span<double> gx, std::span<double> gy, double grad_scale);

}  // namespace omp

/// Below this many multiply-adds the serial path is used.
inline constexpr std::size_t kParallelThreshold = 1u << 15;

bool use_parallel(std::size_t work);

void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
          std::size_t k, std::size_t n);
void gemm_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t k, std::size_t n);
void gemm_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t n, std::size_t k);
void conv3x3(std::span<const double> in, std::span<const double> w, std::span<const double> bias,
             std::span<double> out, std::size_t h, std::size_t wd, std::size_t cin, std::size_t cout);
void pairwise_sq_dist(std::span<const double> x, std::span<const double> y, std::span<double> out,
                      std::size_t n, std::size_t m, std::size_t d);
double gaussian_pair_sum(std::span<const double> x, std::span<const double> y, std::size_t n,
                         std::size_t m, std::size_t d, GaussianMix mix, bool skip_diagonal,
                         std::span<double> gx, std::span<double> gy, double grad_scale);

}  // namespace vprda::kernels
