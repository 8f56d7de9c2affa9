#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "support.hpp"
#include "vprda/geo.hpp"
#include "vprda/head.hpp"

using namespace vprda;
using namespace vprda::head;
using testing::random_head;
using testing::random_tensor;

namespace {

std::vector<double> values(const Tensor& t) { return t.vec(); }

Tensor flat(const std::vector<double>& w) { return Tensor({w.size()}, w); }

}  // namespace

TEST_CASE("soft assignment cases") {
  std::mt19937_64 rng(31);
  const Tensor x = random_tensor({5, 3}, rng);
  HeadParams p = random_head(rng, 3, 3, 1);
  const Tensor a1 = soft_assign(x, p);
  for (double v : a1.data()) CHECK(v == 1.0);

  p = random_head(rng, 3, 3, 4);
  p.assign_w.fill(0.0);
  p.assign_b.fill(0.0);
  for (double v : values(soft_assign(x, p))) CHECK(v == 0.25);

  // logits (10, 0, 0, 0)
  p.assign_b = Tensor({4}, std::vector<double>{10, 0, 0, 0});
  const Tensor a = soft_assign(x, p);
  const double expect = std::exp(10.0) / (std::exp(10.0) + 3.0);
  CHECK(a.at(0, 0) == doctest::Approx(expect).epsilon(1e-14));
  CHECK(a.at(0, 0) > 0.9998);

  p = random_head(rng, 3, 3, 4);
  const Tensor r = soft_assign(x, p);
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < 4; ++c) s += r.at(i, c);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("vlad closed-form cases") {
  std::mt19937_64 rng(32);
  HeadParams p = random_head(rng, 4, 4, 1);
  const Tensor c = p.centers;
  const VladDescriptor zero = vlad(c, Tensor({1, 1}, 1.0), p);
  for (double v : zero.v.data()) CHECK(v == 0.0);
  for (double v : zero.embedding.data()) CHECK(v == 0.0);

  p = random_head(rng, 4, 4, 3);
  const Tensor x1 = random_tensor({1, 4}, rng);
  Tensor x2({2, 4});
  for (std::size_t j = 0; j < 4; ++j) x2[j] = x2[4 + j] = x1[j];
  const Tensor a1 = soft_assign(x1, p), a2 = soft_assign(x2, p);
  const VladDescriptor single = vlad(x1, a1, p), twice = vlad(x2, a2, p);
  for (std::size_t i = 0; i < single.v.size(); ++i) CHECK(twice.v[i] == doctest::Approx(2.0 * single.v[i]).epsilon(1e-14));
}

TEST_CASE("vlad variants match brute-force oracles") {
  std::mt19937_64 rng(33);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = testing::pick(rng, 1, 8), d = testing::pick(rng, 1, 6), k = testing::pick(rng, 1, 4);
    const bool intra = trial % 2 == 0;
    const HeadParams p = random_head(rng, d, d, k, Mode::fused, intra ? Normalization::intra_global : Normalization::global);
    const Tensor x = random_tensor({n, d}, rng);
    const std::vector<double> w = values(testing::uniform_tensor({n}, rng, 0.05, 3.0));
    Tensor a({n, k});
    for (std::size_t i = 0; i < n; ++i) {
      const auto ai = oracle::assign(oracle::row(x, i), p);
      for (std::size_t c = 0; c < k; ++c) a.at(i, c) = ai[c];
    }
    const Tensor ov = oracle::vlad(x, a, p.centers), o1 = oracle::vlad_a1(x, w, p), o2 = oracle::vlad_a2(x, w, p),
                 of = oracle::vlad_fused(x, w, p);
    const auto gv = vlad(x, soft_assign(x, p), p), g1 = vlad_a1(x, flat(w), p), g2 = vlad_a2(x, flat(w), p),
               gf = vlad_fused(x, flat(w), p);
    worst = std::max({worst, max_abs_diff(gv.v, ov), max_abs_diff(g1.v, o1), max_abs_diff(g2.v, o2), max_abs_diff(gf.v, of)});
    worst = std::max({worst, max_abs_diff(gv.embedding, oracle::normalize(ov, intra)),
                      max_abs_diff(gf.embedding, oracle::normalize(of, intra))});
  }
  CHECK(worst <= 1e-10);
}

TEST_CASE("unit attention collapses to vanilla and zero attention annihilates") {
  std::mt19937_64 rng(34);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = testing::pick(rng, 1, 8), d = testing::pick(rng, 1, 6), k = testing::pick(rng, 1, 4);
    const HeadParams p = random_head(rng, d, d, k);
    const Tensor x = random_tensor({n, d}, rng);
    const Tensor ones({n}, 1.0), zeros({n}, 0.0);
    const auto van = vlad(x, soft_assign(x, p), p);
    CHECK(max_abs_diff(vlad_a1(x, ones, p).v, van.v) <= 1e-10);
    CHECK(max_abs_diff(vlad_a2(x, ones, p).v, van.v) <= 1e-10);
    const auto fu = vlad_fused(x, ones, p);
    for (std::size_t i = 0; i < van.v.size(); ++i) CHECK(std::abs(fu.v[i] - 2.0 * van.v[i]) <= 1e-10);
    CHECK(max_abs_diff(fu.embedding, van.embedding) <= 1e-10);

    for (double v : values(vlad_a1(x, zeros, p).v)) CHECK(v == 0.0);
    const auto z = vlad_fused(x, zeros, p);
    for (double v : z.embedding.data()) CHECK(v == 0.0);
  }
  const HeadParams p1 = random_head(rng, 3, 3, 1);
  for (double v : values(vlad_a2(random_tensor({4, 3}, rng), Tensor({4}, 0.0), p1).v)) CHECK(v == 0.0);
}

TEST_CASE("aggregation is invariant to descriptor order") {
  std::mt19937_64 rng(35);
  const HeadParams p = random_head(rng, 5, 5, 3);
  const Tensor x = random_tensor({7, 5}, rng);
  const Tensor w = testing::uniform_tensor({7}, rng, 0.1, 2.0);
  std::vector<std::size_t> perm{3, 6, 0, 2, 5, 1, 4};
  Tensor xp({7, 5}), wp({7});
  for (std::size_t i = 0; i < 7; ++i) {
    wp[i] = w[perm[i]];
    for (std::size_t j = 0; j < 5; ++j) xp.at(i, j) = x.at(perm[i], j);
  }
  CHECK(max_abs_diff(vlad_fused(x, w, p).embedding, vlad_fused(xp, wp, p).embedding) <= 1e-12);
}

TEST_CASE("attention map positivity and uniform case") {
  std::mt19937_64 rng(36);
  HeadParams p = random_head(rng, 4, 4, 2);
  for (int t = 0; t < 10; ++t) {
    const Tensor s = attention(random_tensor({5, 6, 4}, rng, 3.0), p);
    CHECK(s.shape() == Shape{5, 6});
    CHECK(*std::min_element(s.data().begin(), s.data().end()) > 0.0);
  }
  p.attn_w.fill(0.0);
  p.attn_b.fill(0.0);
  for (double v : values(attention(random_tensor({3, 3, 4}, rng), p))) CHECK(v == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("adapter cases") {
  std::mt19937_64 rng(37);
  HeadParams p = random_head(rng, 3, 3, 2);
  const Tensor fm = random_tensor({4, 5, 3}, rng);
  p.adapter_w.fill(0.0);
  p.adapter_b.fill(0.0);
  for (double v : values(adapter(fm, p))) CHECK(v == 0.0);
  for (std::size_t c = 0; c < 3; ++c) p.adapter_w[4 * 9 + c * 3 + c] = 1.0;
  const Tensor out = adapter(fm, p);
  for (std::size_t i = 0; i < fm.size(); ++i) CHECK(out[i] == std::max(0.0, fm[i]));
}

TEST_CASE("embed modes") {
  std::mt19937_64 rng(38);
  HeadParams p = random_head(rng, 4, 4, 3, Mode::vanilla);
  const Tensor fm = random_tensor({4, 4, 4}, rng);
  const auto base = embed(fm, p);
  p.attn_w = random_tensor({4, 1}, rng, 5.0);
  CHECK(max_abs_diff(embed(fm, p).embedding, base.embedding) == 0.0);

  p.mode = Mode::fused;
  const Tensor x = adapter(fm, p).reshaped({16, 4});
  const Tensor w = attention(adapter(fm, p), p).reshaped({16});
  const auto a1 = vlad_a1(x, w, p), a2 = vlad_a2(x, w, p);
  const auto fused = embed(fm, p);
  for (std::size_t i = 0; i < fused.v.size(); ++i) CHECK(fused.v[i] == doctest::Approx(a1.v[i] + a2.v[i]).epsilon(1e-13));
  double sq = 0.0;
  for (double v : fused.embedding.data()) sq += v * v;
  CHECK(sq == doctest::Approx(1.0).epsilon(1e-13));

  const std::vector<const Tensor*> maps{&fm, &fm};
  const auto batch = embed_batch(maps, p);
  CHECK(max_abs_diff(batch[1], fused.embedding) == 0.0);
}

TEST_CASE("end-to-end embedding gradients for every parameter group") {
  std::mt19937_64 rng(39);
  for (Mode mode : {Mode::vanilla, Mode::a1, Mode::a2, Mode::fused})
    for (Normalization norm : {Normalization::intra_global, Normalization::global}) {
      const HeadParams p = random_head(rng, 3, 3, 2, mode, norm);
      const Tensor fm = random_tensor({3, 3, 3}, rng);
      const Tensor target = random_tensor({6}, rng, 0.3);
      std::vector<Tensor> inputs;
      for (const Tensor* t : p.tensors()) inputs.push_back(*t);
      auto f = [&](const std::vector<Var>& v) {
        HeadVars hv(p);
        hv.adapter_w = v[0], hv.adapter_b = v[1], hv.attn_w = v[2], hv.attn_b = v[3];
        hv.assign_w = v[4], hv.assign_b = v[5], hv.centers = v[6];
        const auto fw = embed_graph(leaf(fm), hv);
        return ops::sum_squares(ops::sub(fw.embedding, leaf(target)));
      };
      CAPTURE(to_string(mode));
      CHECK(testing::gradient_error(f, inputs) <= 1e-4);
    }
}

TEST_CASE("attention gradient of summed scores") {
  std::mt19937_64 rng(40);
  const HeadParams p = random_head(rng, 4, 4, 2);
  const Tensor fm = random_tensor({3, 4, 4}, rng);
  auto f = [&](const std::vector<Var>& v) {
    HeadVars hv(p);
    hv.attn_w = v[0];
    hv.attn_b = v[1];
    return ops::sum(attention(leaf(fm), hv));
  };
  CHECK(testing::gradient_error(f, {p.attn_w, p.attn_b}) <= 1e-4);
}

TEST_CASE("heatmap pixels and PGM output") {
  for (std::uint8_t v : heatmap_pixels(Tensor({3, 4}, 0.7))) CHECK(v == 128);
  std::mt19937_64 rng(41);
  const Tensor s = random_tensor({6, 5}, rng);
  const auto px = heatmap_pixels(s);
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (s[i] > s[j]) CHECK(px[i] >= px[j]);
  CHECK(*std::min_element(px.begin(), px.end()) == 0);
  CHECK(*std::max_element(px.begin(), px.end()) == 255);

  testing::TempDir dir("heatmap");
  const HeadParams p = random_head(rng, 4, 4, 2);
  export_heatmap(random_tensor({6, 9, 4}, rng), p, dir / "h.pgm");
  const std::string bytes = testing::slurp(dir / "h.pgm");
  const std::string header = "P5\n9 6\n255\n";
  CHECK(bytes.substr(0, header.size()) == header);
  CHECK(bytes.size() == header.size() + 54);
}

TEST_CASE("checkpoint round trip and validation") {
  testing::TempDir dir("ckpt");
  std::mt19937_64 rng(42);
  const HeadParams p = random_head(rng, 4, 3, 5, Mode::a2, Normalization::global);
  save_checkpoint(p, dir / "c.ckpt");
  const HeadParams q = load_checkpoint(dir / "c.ckpt");
  CHECK(q.mode == Mode::a2);
  CHECK(q.norm == Normalization::global);
  const auto a = p.tensors();
  const auto b = q.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i]->shape() == b[i]->shape());
    CHECK(max_abs_diff(*a[i], *b[i]) == 0.0);
  }
  std::string bytes = testing::slurp(dir / "c.ckpt");
  std::ofstream(dir / "t.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 1);
  CHECK_THROWS_AS(load_checkpoint(dir / "t.ckpt"), geo::DataError);
  bytes[0] = 'Z';
  std::ofstream(dir / "m.ckpt", std::ios::binary) << bytes;
  CHECK_THROWS_AS(load_checkpoint(dir / "m.ckpt"), geo::DataError);
}

TEST_CASE("init and k-means") {
  std::mt19937_64 rng(43);
  HeadParams p = init_params(4, 4, 3, Mode::fused, Normalization::intra_global, rng);
  CHECK_NOTHROW(p.validate());
  CHECK_THROWS(init_params(4, 5, 3, Mode::fused, Normalization::intra_global, rng));
  // three well separated blobs
  Tensor pts({30, 4});
  for (std::size_t i = 0; i < 30; ++i)
    for (std::size_t j = 0; j < 4; ++j) pts.at(i, j) = (j == i % 3 ? 10.0 : 0.0) + 0.01 * static_cast<double>(i % 7);
  init_clusters(p, pts, 5);
  for (std::size_t i = 0; i < 30; ++i) {
    const Tensor a = soft_assign(pts.reshaped({30, 4}), p);
    double hi = 0.0;
    for (std::size_t c = 0; c < 3; ++c) hi = std::max(hi, a.at(i, c));
    CHECK(hi > 0.999);
  }
  const Tensor c1 = kmeans(pts, 3, 10, 9), c2 = kmeans(pts, 3, 10, 9);
  CHECK(max_abs_diff(c1, c2) == 0.0);
}
