#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "support.hpp"
#include "vprda/losses.hpp"

using namespace vprda;
using namespace vprda::losses;
using testing::random_tensor;

namespace {

Tensor vec1(std::initializer_list<double> v) { return Tensor({v.size()}, std::vector<double>(v)); }

// Points on a line so squared distances are exact.
TripletTuple line_tuple(std::vector<double> pos, std::vector<double> neg, double m) {
  TripletTuple t;
  t.query = vec1({0.0});
  for (double p : pos) t.positives.push_back(vec1({std::sqrt(p)}));
  for (double n : neg) t.negatives.push_back(vec1({std::sqrt(n)}));
  t.margin = m;
  return t;
}

}  // namespace

TEST_CASE("triplet loss examples") {
  CHECK(triplet_loss(line_tuple({0.04}, {0.25}, 0.1)) == 0.0);
  CHECK(triplet_loss(line_tuple({0.30}, {0.35}, 0.1)) == doctest::Approx(0.05).epsilon(1e-12));
  CHECK(triplet_loss(line_tuple({0.5, 0.2}, {0.25, 0.4}, 0.1)) == doctest::Approx(0.05).epsilon(1e-12));

  TripletTuple empty = line_tuple({0.1}, {}, 0.1);
  CHECK_THROWS_AS(triplet_loss(empty), std::invalid_argument);
  empty = line_tuple({}, {0.1}, 0.1);
  CHECK_THROWS_AS(triplet_loss(empty), std::invalid_argument);
}

TEST_CASE("triplet loss matches enumeration and is permutation invariant") {
  std::mt19937_64 rng(51);
  for (int t = 0; t < 100; ++t) {
    const std::size_t d = testing::pick(rng, 1, 6), np = testing::pick(rng, 1, 5), nn = testing::pick(rng, 1, 6);
    TripletTuple tup;
    tup.query = random_tensor({d}, rng, 0.5);
    std::vector<std::vector<double>> ps, ns;
    for (std::size_t i = 0; i < np; ++i) ps.push_back(tup.positives.emplace_back(random_tensor({d}, rng, 0.5)).vec());
    for (std::size_t i = 0; i < nn; ++i) ns.push_back(tup.negatives.emplace_back(random_tensor({d}, rng, 0.5)).vec());
    const double got = triplet_loss(tup);
    CHECK(std::abs(got - oracle::triplet(tup.query.vec(), ps, ns, tup.margin)) <= 1e-12);
    std::shuffle(tup.positives.begin(), tup.positives.end(), rng);
    std::shuffle(tup.negatives.begin(), tup.negatives.end(), rng);
    CHECK(std::abs(triplet_loss(tup) - got) <= 1e-12);
  }
}

TEST_CASE("triplet subgradient conventions") {
  // exact zero hinge: 0.25 + 0.75 - 1.0
  const Var q = leaf(vec1({0.0}));
  const Var p = leaf(vec1({0.5})), n = leaf(vec1({1.0}));
  const Var ps[] = {p}, ns[] = {n};
  const Var l = triplet_loss(q, ps, ns, 0.75);
  CHECK(l.item() == 0.0);
  backward(l);
  CHECK(n.grad()[0] == 0.0);
  CHECK(p.grad()[0] == 0.0);

  // tied positives: only the first receives gradient
  const Var q2 = leaf(vec1({0.0}));
  const Var a = leaf(vec1({0.5})), b = leaf(vec1({-0.5})), m = leaf(vec1({0.6}));
  const Var tp[] = {a, b}, tn[] = {m};
  backward(triplet_loss(q2, tp, tn, 0.5));
  CHECK(a.grad()[0] != 0.0);
  CHECK(b.grad()[0] == 0.0);
}

TEST_CASE("triplet gradients match finite differences") {
  std::mt19937_64 rng(52);
  for (int t = 0; t < 20; ++t) {
    std::vector<Tensor> in;
    for (int i = 0; i < 6; ++i) in.push_back(random_tensor({3}, rng, 0.4));
    auto f = [](const std::vector<Var>& v) {
      const Var ps[] = {v[1], v[2]}, ns[] = {v[3], v[4], v[5]};
      return triplet_loss(v[0], ps, ns, 0.3);
    };
    CHECK(testing::gradient_error(f, in) <= 1e-4);
  }
}

TEST_CASE("mk-mmd examples") {
  std::mt19937_64 rng(53);
  MmdConfig cfg;
  const Tensor x = random_tensor({9, 3}, rng);
  CHECK(std::abs(mk_mmd(x, x, cfg)) <= 1e-12);

  MmdConfig one;
  one.bandwidths = {1.5};
  one.weights = {1.0};
  const Tensor a = Tensor({1, 2}, std::vector<double>{0.0, 0.0}), b = Tensor({1, 2}, std::vector<double>{1.0, 2.0});
  CHECK(mk_mmd(a, b, one) == doctest::Approx(2.0 - 2.0 * std::exp(-5.0 / (2 * 2.25))).epsilon(1e-14));
  CHECK(mk_mmd(a, a, one) == 0.0);
  const Tensor far = Tensor({1, 2}, std::vector<double>{1e3, 0.0});
  CHECK(mk_mmd(a, far, one) == 2.0);

  MmdConfig unb = cfg;
  unb.estimator = Estimator::unbiased;
  CHECK_THROWS_AS(mk_mmd(a, b, unb), std::invalid_argument);
  MmdConfig bad = cfg;
  bad.weights.pop_back();
  CHECK_THROWS(bad.validate());
}

TEST_CASE("mk-mmd matches double-loop oracle, symmetric, positive on offset clouds") {
  std::mt19937_64 rng(54);
  for (auto est : {Estimator::biased, Estimator::unbiased}) {
    MmdConfig cfg;
    cfg.estimator = est;
    cfg.bandwidths = {0.3, 0.9, 1.7, 2.2, 5.0};
    cfg.weights = {0.1, 0.3, 0.2, 0.25, 0.15};
    Tensor xs = random_tensor({8, 2}, rng), xt = random_tensor({8, 2}, rng);
    for (std::size_t i = 0; i < 8; ++i) xt.at(i, 0) += 3.0;
    const double got = mk_mmd(xs, xt, cfg);
    CHECK(std::abs(got - oracle::mmd(xs, xt, cfg.bandwidths, cfg.weights, est == Estimator::unbiased)) <= 1e-10);
    CHECK(got > 0.0);
    CHECK(std::abs(got - mk_mmd(xt, xs, cfg)) <= 1e-14);
    const Tensor ys = random_tensor({5, 2}, rng), yt = random_tensor({11, 2}, rng);
    CHECK(std::abs(mk_mmd(ys, yt, cfg) - oracle::mmd(ys, yt, cfg.bandwidths, cfg.weights, est == Estimator::unbiased)) <= 1e-10);
  }
}

TEST_CASE("mk-mmd gradients match finite differences") {
  std::mt19937_64 rng(55);
  for (auto est : {Estimator::biased, Estimator::unbiased}) {
    MmdConfig cfg;
    cfg.estimator = est;
    auto f = [&](const std::vector<Var>& v) { return mk_mmd(v[0], v[1], cfg); };
    CHECK(testing::gradient_error(f, {random_tensor({6, 3}, rng), random_tensor({4, 3}, rng, 1.5)}) <= 1e-4);
  }
}

TEST_CASE("median bandwidths") {
  const auto two = median_bandwidths(Tensor({2, 2}, std::vector<double>{0, 0, 0, 2}));
  CHECK(two.median == 2.0);
  CHECK(two.values == std::vector<double>{0.5, 1, 2, 4, 8});
  CHECK_FALSE(two.degenerate);

  const auto same = median_bandwidths(Tensor({4, 3}, 1.25));
  CHECK(same.degenerate);
  CHECK(same.median == 0.0);
  CHECK(same.values == std::vector<double>{0.25, 0.5, 1, 2, 4});

  std::mt19937_64 rng(56);
  const Tensor x = random_tensor({100, 5}, rng);
  std::vector<double> d;
  for (std::size_t i = 0; i < 100; ++i)
    for (std::size_t j = i + 1; j < 100; ++j) d.push_back(std::sqrt(oracle::sq_dist(oracle::row(x, i), oracle::row(x, j))));
  std::sort(d.begin(), d.end());
  const double med = d.size() % 2 ? d[d.size() / 2] : 0.5 * (d[d.size() / 2 - 1] + d[d.size() / 2]);
  const auto b = median_bandwidths(x);
  CHECK(b.median == med);
  for (std::size_t u = 0; u < 5; ++u) CHECK(b.values[u] == med * kBandwidthMultipliers[u]);
  CHECK_THROWS(median_bandwidths(Tensor({1, 3}, 0.0)));
}

TEST_CASE("combined loss") {
  CHECK(combined_loss(0.05, 0.02, 0.99) == doctest::Approx(0.0698).epsilon(1e-14));
  CHECK(combined_loss(0.05, 0.02, 0.0) == 0.05);
  CHECK(MmdConfig{}.alpha == 0.99);
  const Var r = leaf(Tensor::scalar(0.05)), m = leaf(Tensor::scalar(0.02));
  const Var c = combined_loss(r, m, 0.99);
  backward(c);
  CHECK(m.grad()[0] == 0.99);
  CHECK(r.grad()[0] == 1.0);
}
