#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "vprda/tensor.hpp"

namespace vprda::geo {

/// Malformed or inconsistent input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kEarthRadiusM = 6371008.8;
inline constexpr double kPositiveRadiusM = 25.0;

struct LatLon {
  double lat = 0.0;
  double lon = 0.0;
};

/// Great-circle distance on a sphere of radius kEarthRadiusM.
double haversine_m(LatLon a, LatLon b);

enum class Domain { source, target };
enum class Split { train_gallery, train_query, test_gallery, test_query };

std::string to_string(Domain d);
std::string to_string(Split s);
Domain parse_domain(const std::string& s);
Split parse_split(const std::string& s);

struct GeoRecord {
  std::string id;
  std::optional<LatLon> pos;  // unlabeled target images carry no geo-tag
  Domain domain = Domain::source;
  Split split = Split::train_gallery;
  std::string fmap_path;  // relative to the dataset root
};

// FMAP1: "FMAP1\0", H, W, D as u32 LE, then H*W*D f32 LE (h, w, channel).
void write_fmap(const std::filesystem::path& path, const Tensor& fm);
Tensor read_fmap(const std::filesystem::path& path);

/// In-memory view of a manifest. Immutable after load.
class DatasetIndex {
 public:
  DatasetIndex() = default;
  DatasetIndex(std::filesystem::path root, std::vector<GeoRecord> records);

  const std::filesystem::path& root() const { return root_; }
  const std::vector<GeoRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool contains(const std::string& id) const { return by_id_.count(id) != 0; }
  const GeoRecord& at(const std::string& id) const;

  /// Ids with the given split (and domain), in manifest order.
  std::vector<std::string> ids(Split split) const;
  std::vector<std::string> ids(Split split, Domain domain) const;

  std::filesystem::path fmap_file(const GeoRecord& r) const { return root_ / r.fmap_path; }

 private:
  std::filesystem::path root_;
  std::vector<GeoRecord> records_;
  std::unordered_map<std::string, std::size_t> by_id_;
};

/// Parses a JSON-lines manifest. Feature-map files are not touched here.
DatasetIndex load_dataset(const std::filesystem::path& manifest_path);
void write_manifest(const std::filesystem::path& path, const std::vector<GeoRecord>& records);

/// Ids of gallery records within radius_m of q, nearest first, ties by id.
/// Throws DataError when q has no geo-tag.
std::vector<std::string> potential_positives(const GeoRecord& q, const std::vector<const GeoRecord*>& gallery,
                                             double radius_m);

/// Cached on-demand feature-map loader that counts reads per domain.
class FeatureStore {
 public:
  explicit FeatureStore(const DatasetIndex& data) : data_(&data) {}
  FeatureStore(const FeatureStore&) = delete;
  FeatureStore& operator=(const FeatureStore&) = delete;

  const Tensor& get(const std::string& id);
  std::size_t reads(Domain d) const { return d == Domain::source ? source_reads_.load() : target_reads_.load(); }
  /// Loads every listed id (parallel over files).
  void preload(const std::vector<std::string>& ids);

 private:
  const DatasetIndex* data_;
  std::mutex mu_;
  std::unordered_map<std::string, Tensor> cache_;
  std::atomic<std::size_t> source_reads_{0};
  std::atomic<std::size_t> target_reads_{0};
};

struct SynthConfig {
  std::size_t n_places = 50;
  std::size_t views_per_place = 4;
  std::size_t target_views_per_place = 2;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t channels = 16;
  double shift = 1.0;        // domain-shift strength s
  double signature_fraction = 0.3;  // fraction of locations carrying place content
  double clutter_scale = 1.0;
  double noise = 0.15;
  double target_noise = 0.15;  // added on top of `noise` for target views
  double outlier_prob = 0.1;
  std::uint64_t seed = 7;
};

struct SynthSummary {
  std::size_t source_records = 0;
  std::size_t target_records = 0;
  std::size_t outliers = 0;
};

/// Writes a complete dataset directory under out_dir.
SynthSummary synth_generate(const SynthConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace vprda::geo
