#include <omp.h>

#include <random>

#include "doctest.h"
#include "support.hpp"
#include "vprda/kernels.hpp"

using namespace vprda;
namespace k = vprda::kernels;
using testing::random_tensor;

namespace {

bool identical(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("parallel kernels are bit-identical to serial references") {
  omp_set_num_threads(4);
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t m = testing::pick(rng, 1, 70), kk = testing::pick(rng, 1, 40), n = testing::pick(rng, 1, 50);
    const Tensor a = random_tensor({m, kk}, rng), b = random_tensor({kk, n}, rng);
    Tensor c1({m, n}), c2({m, n});
    k::serial::gemm(a.data(), b.data(), c1.data(), m, kk, n);
    k::omp::gemm(a.data(), b.data(), c2.data(), m, kk, n);
    CHECK(identical(c1.data(), c2.data()));

    const Tensor bt = random_tensor({m, n}, rng);
    Tensor t1 = random_tensor({kk, n}, rng), t2 = t1;
    k::serial::gemm_tn_acc(a.data(), bt.data(), t1.data(), m, kk, n);
    k::omp::gemm_tn_acc(a.data(), bt.data(), t2.data(), m, kk, n);
    CHECK(identical(t1.data(), t2.data()));

    const Tensor an = random_tensor({m, n}, rng), bn = random_tensor({kk, n}, rng);
    Tensor u1 = random_tensor({m, kk}, rng), u2 = u1;
    k::serial::gemm_nt_acc(an.data(), bn.data(), u1.data(), m, n, kk);
    k::omp::gemm_nt_acc(an.data(), bn.data(), u2.data(), m, n, kk);
    CHECK(identical(u1.data(), u2.data()));

    const std::size_t h = testing::pick(rng, 1, 12), w = testing::pick(rng, 1, 12);
    const std::size_t cin = testing::pick(rng, 1, 6), cout = testing::pick(rng, 1, 6);
    const Tensor in = random_tensor({h, w, cin}, rng), wt = random_tensor({3, 3, cin, cout}, rng);
    const Tensor bias = random_tensor({cout}, rng);
    Tensor o1({h, w, cout}), o2({h, w, cout});
    k::serial::conv3x3(in.data(), wt.data(), bias.data(), o1.data(), h, w, cin, cout);
    k::omp::conv3x3(in.data(), wt.data(), bias.data(), o2.data(), h, w, cin, cout);
    CHECK(identical(o1.data(), o2.data()));

    const std::size_t d = testing::pick(rng, 1, 8);
    const Tensor x = random_tensor({m, d}, rng), y = random_tensor({n, d}, rng);
    Tensor p1({m, n}), p2({m, n});
    k::serial::pairwise_sq_dist(x.data(), y.data(), p1.data(), m, n, d);
    k::omp::pairwise_sq_dist(x.data(), y.data(), p2.data(), m, n, d);
    CHECK(identical(p1.data(), p2.data()));

    const std::vector<double> bw{0.5, 1.0, 2.0}, wts{0.2, 0.3, 0.5};
    for (bool skip : {false, true}) {
      Tensor gx1({m, d}), gy1({n, d}), gx2({m, d}), gy2({n, d});
      const double s1 = k::serial::gaussian_pair_sum(x.data(), y.data(), m, n, d, {bw, wts}, skip, gx1.data(),
                                                     gy1.data(), 0.7);
      const double s2 =
          k::omp::gaussian_pair_sum(x.data(), y.data(), m, n, d, {bw, wts}, skip, gx2.data(), gy2.data(), 0.7);
      CHECK(s1 == s2);
      CHECK(identical(gx1.data(), gx2.data()));
      CHECK(identical(gy1.data(), gy2.data()));
    }
  }
}

TEST_CASE("gaussian_pair_sum matches a direct double loop") {
  std::mt19937_64 rng(12);
  const std::size_t n = 7, m = 5, d = 3;
  const Tensor x = random_tensor({n, d}, rng), y = random_tensor({m, d}, rng);
  const std::vector<double> bw{0.7, 1.9}, wts{0.4, 0.6};
  double expect = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double sq = 0.0;
      for (std::size_t c = 0; c < d; ++c) sq += (x.at(i, c) - y.at(j, c)) * (x.at(i, c) - y.at(j, c));
      for (std::size_t u = 0; u < 2; ++u) expect += wts[u] * std::exp(-sq / (2 * bw[u] * bw[u]));
    }
  const double got = k::gaussian_pair_sum(x.data(), y.data(), n, m, d, {bw, wts}, false, {}, {}, 1.0);
  CHECK(got == doctest::Approx(expect).epsilon(1e-13));
}

TEST_CASE("dispatch threshold") {
  CHECK_FALSE(k::use_parallel(10));
  omp_set_num_threads(1);
  CHECK_FALSE(k::use_parallel(k::kParallelThreshold * 4));
  omp_set_num_threads(4);
}
