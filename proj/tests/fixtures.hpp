#pragma once

#include <random>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "support.hpp"
#include "vprda/trainer.hpp"

namespace testing {

/// Two tuples of random maps plus optional target maps and MMD row picks.
inline vprda::trainer::Batch random_batch(std::mt19937_64& rng, std::size_t d, bool with_target,
                                          std::size_t positives = 2, std::size_t negatives = 3, std::size_t side = 3) {
  vprda::trainer::Batch b;
  const std::size_t cells = side * side;
  for (int t = 0; t < 2; ++t) {
    vprda::trainer::MinedTuple tup;
    const std::string tag = std::to_string(t);
    tup.query = "q" + tag;
    for (std::size_t i = 0; i < positives; ++i) tup.positives.push_back("p" + tag + static_cast<char>('a' + i));
    for (std::size_t i = 0; i < negatives; ++i) tup.negatives.push_back("n" + tag + static_cast<char>('a' + i));
    b.tuple_offsets.push_back(b.tuple_maps.size());
    for (std::size_t i = 0; i < 1 + positives + negatives; ++i) b.tuple_maps.push_back(random_tensor({side, side, d}, rng));
    b.tuples.push_back(tup);
  }
  if (with_target) {
    for (int i = 0; i < 2; ++i) {
      b.target_ids.push_back("t" + std::to_string(i));
      b.target_maps.push_back(random_tensor({side, side, d}, rng, 1.5));
    }
    const std::size_t source_cells = b.tuple_maps.size() * cells;
    for (std::size_t i = 0; i < 12; ++i) {
      b.source_rows.push_back(pick(rng, 0, source_cells - 1));
      b.target_rows.push_back(pick(rng, 0, 2 * cells - 1));
    }
  }
  return b;
}

/// The batch's combined loss as a graph over leaves holding the seven head
/// tensors, for finite-difference checks.
inline ScalarFn batch_loss_fn(const vprda::head::HeadParams& p, const vprda::trainer::Batch& batch,
                              const vprda::trainer::TrainConfig& cfg, const std::vector<double>& bandwidths) {
  return [=](const std::vector<vprda::Var>& v) {
    vprda::head::HeadParams q = p;
    auto ts = q.tensors();
    for (std::size_t i = 0; i < ts.size(); ++i) *ts[i] = v[i].value();
    vprda::trainer::BatchLoss l = vprda::trainer::batch_loss(q, batch, cfg, bandwidths);
    const auto inner = l.vars->all();
    return vprda::make_node(l.combined.value(), v, [l, inner](vprda::Node& self) {
      vprda::backward(l.combined);
      for (std::size_t i = 0; i < inner.size(); ++i) {
        vprda::Tensor& g = self.parents[i].node()->grad_buffer();
        const vprda::Tensor gi = inner[i].grad();
        for (std::size_t j = 0; j < g.size(); ++j) g[j] += self.grad[0] * gi[j];
      }
    });
  };
}

inline std::vector<vprda::Tensor> head_tensors(const vprda::head::HeadParams& p) {
  std::vector<vprda::Tensor> out;
  for (const vprda::Tensor* t : p.tensors()) out.push_back(*t);
  return out;
}

}  // namespace testing
