#pragma once

// Weakly supervised training over geo-tagged tuples with cached hard-negative
// mining, plus an MK-MMD term on unlabeled target-domain maps.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "vprda/geo.hpp"
#include "vprda/head.hpp"
#include "vprda/losses.hpp"

namespace vprda::trainer {

/// Raised when training produces a non-finite loss.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double lr = 1e-5;
  std::size_t batch_tuples = 2;
  std::size_t positives = 13;  // with 1 query and neg_keep negatives: 24 images per tuple
  std::size_t epochs = 25;
  std::size_t neg_sample = 1000;
  std::size_t neg_keep = 10;
  double margin = losses::kDefaultMargin;
  double alpha = losses::kDefaultAlpha;
  double radius_m = geo::kPositiveRadiusM;
  std::size_t refresh_every = 1000;
  std::size_t clusters = 64;
  head::Mode mode = head::Mode::fused;
  head::Normalization norm = head::Normalization::intra_global;
  losses::Estimator estimator = losses::Estimator::biased;
  std::size_t mmd_samples = 256;       // descriptors per domain per step
  std::size_t mmd_target_images = 4;   // target maps drawn per step
  bool augment = true;
  double crop_min = 0.5;
  double crop_max = 1.0;
  std::size_t kmeans_iters = 20;
  std::size_t kmeans_images = 100;
  std::uint64_t seed = 7;

  /// Sets one field from its config-file / flag spelling. Throws
  /// std::invalid_argument for unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  /// Key/value pairs of every field, in declaration order.
  std::vector<std::pair<std::string, std::string>> items() const;
  void validate() const;
};

/// Reads a JSON object or key=value lines (# comments allowed).
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {});

// ---------------------------------------------------------------- Adam

struct AdamState {
  std::vector<Tensor> m, v;
  std::size_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of every tensor in `params`.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state, double lr);

// ---------------------------------------------------------------- mining

/// Frozen snapshot of embeddings used to rank negatives.
class MiningCache {
 public:
  explicit MiningCache(std::size_t refresh_every = 1000) : refresh_every_(refresh_every) {}

  void refresh(const head::HeadParams& params, const std::vector<std::string>& ids, geo::FeatureStore& store);
  /// Direct assignment, for callers that already hold embeddings.
  void assign(std::unordered_map<std::string, Tensor> embeddings);

  bool stale() const { return age_ >= refresh_every_; }
  void tick() { ++age_; }
  std::size_t age() const { return age_; }
  std::size_t refresh_every() const { return refresh_every_; }
  std::size_t refreshes() const { return refreshes_; }
  const Tensor& embedding(const std::string& id) const;

 private:
  std::unordered_map<std::string, Tensor> emb_;
  std::size_t age_ = 0;
  std::size_t refresh_every_;
  std::size_t refreshes_ = 0;
};

struct MinedTuple {
  std::string query;
  std::vector<std::string> positives;  // geo-nearest first
  std::vector<std::string> sampled;    // candidate negatives drawn this time
  std::vector<std::string> negatives;  // hardest neg_keep of `sampled`
};

enum class SkipReason { no_positives, no_negatives };

/// Positives: up to cfg.positives gallery images within cfg.radius_m, nearest
/// first. Negatives: min(neg_sample, available) random gallery images beyond
/// the radius, ranked by cached squared embedding distance to the query
/// (ties by id); the closest neg_keep are kept.
std::variant<MinedTuple, SkipReason> mine_tuple(const geo::GeoRecord& q, const MiningCache& cache,
                                                 const std::vector<const geo::GeoRecord*>& gallery,
                                                 const TrainConfig& cfg, std::mt19937_64& rng);

// ---------------------------------------------------------------- training

/// Random spatial crop covering [crop_min, crop_max] of each side.
Tensor random_crop(const Tensor& fm, double crop_min, double crop_max, std::mt19937_64& rng);

struct EpochMetrics {
  std::size_t epoch = 0;
  double ranking = 0.0;   // mean L_r per step
  double mmd = 0.0;       // mean M per step
  double combined = 0.0;  // mean L_u per step
  double r1 = 0.0, r5 = 0.0;
  std::size_t skipped = 0;
};

/// One optimizer step's worth of fixed inputs.
struct Batch {
  std::vector<MinedTuple> tuples;
  std::vector<Tensor> tuple_maps;          // per tuple: query, positives, negatives (cropped)
  std::vector<std::size_t> tuple_offsets;  // start of each tuple in tuple_maps
  std::vector<std::string> target_ids;
  std::vector<Tensor> target_maps;
  std::vector<std::size_t> source_rows;  // MMD subsample of pooled source descriptors
  std::vector<std::size_t> target_rows;
};

struct BatchLoss {
  Var ranking, mmd, combined;
  std::optional<head::HeadVars> vars;
};

BatchLoss batch_loss(const head::HeadParams& params, const Batch& batch, const TrainConfig& cfg,
                     const std::vector<double>& bandwidths);

/// One Adam step on the batch loss. Returns the loss values before the update.
BatchLoss train_step(head::HeadParams& params, const Batch& batch, const TrainConfig& cfg,
                     const std::vector<double>& bandwidths, AdamState& adam, double lr);

struct TrainResult {
  head::HeadParams best;
  head::HeadParams last;
  std::vector<EpochMetrics> metrics;
  std::size_t best_epoch = 0;
  std::size_t target_reads = 0;
  std::size_t max_cache_age = 0;
  std::size_t tuples_mined = 0;
  double probe_mmd_initial = 0.0;  // MK-MMD of a fixed source/target probe, before training
  double probe_mmd_final = 0.0;
};

/// Logger receives one line per event; defaults to nothing.
using LogFn = std::function<void(const std::string&)>;

/// Trains a head on the dataset's source train splits (and target train
/// split when alpha > 0). With `out_dir` set, writes the checkpoints and
/// metrics.csv there.
TrainResult train(const geo::DatasetIndex& data, geo::FeatureStore& store, const TrainConfig& cfg,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt, const LogFn& log = {});

/// Initial parameters from init_params, with clusters fitted by k-means over
/// adapted descriptors of sampled training-gallery maps.
head::HeadParams initial_params(const geo::DatasetIndex& data, geo::FeatureStore& store, const TrainConfig& cfg);

std::string metrics_csv(const std::vector<EpochMetrics>& metrics);

}  // namespace vprda::trainer
