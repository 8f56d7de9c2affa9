#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "vprda/geo.hpp"
#include "vprda/head.hpp"
#include "vprda/tensor.hpp"

namespace vprda::retrieval {

/// Exhaustive index over unit-norm embeddings. Immutable after build.
class EmbeddingIndex {
 public:
  EmbeddingIndex() = default;

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  const std::vector<std::string>& ids() const { return ids_; }
  const Tensor& matrix() const { return matrix_; }
  bool contains(const std::string& id) const { return row_.count(id) != 0; }
  const geo::GeoRecord* record(const std::string& id) const;

 private:
  friend EmbeddingIndex build_index(const std::vector<Tensor>&, const std::vector<geo::GeoRecord>&);
  std::vector<std::string> ids_;
  Tensor matrix_;
  std::size_t dim_ = 0;
  std::unordered_map<std::string, std::size_t> row_;
  std::unordered_map<std::string, geo::GeoRecord> meta_;
};

/// Rows are re-normalized on ingest. Duplicate ids throw geo::DataError.
EmbeddingIndex build_index(const std::vector<Tensor>& embeddings, const std::vector<geo::GeoRecord>& records);

struct Hit {
  std::string id;
  double distance;  // squared Euclidean
};

/// The min(n, index size) nearest rows by squared distance; ties by id.
std::vector<Hit> top_n(const EmbeddingIndex& index, const Tensor& query, std::size_t n);

/// Relevant gallery ids per query: explicit labels, or everything within
/// the radius of the query's geo-tag.
class GroundTruth {
 public:
  static GroundTruth geo_radius(double radius_m = geo::kPositiveRadiusM) { return GroundTruth(radius_m); }
  static GroundTruth explicit_pairs(std::map<std::string, std::set<std::string>> pairs);

  bool is_explicit() const { return !radius_; }
  /// Every labeled gallery id must exist in the index.
  void validate(const EmbeddingIndex& index) const;
  std::set<std::string> relevant(const geo::GeoRecord& query, const EmbeddingIndex& index) const;

 private:
  explicit GroundTruth(double r) : radius_(r) {}
  GroundTruth() = default;
  std::optional<double> radius_;
  std::map<std::string, std::set<std::string>> pairs_;
};

/// JSON-lines {"query_id": ..., "relevant_ids": [...]}.
GroundTruth load_pairs(const std::filesystem::path& path);

struct QueryEmbedding {
  geo::GeoRecord record;
  Tensor embedding;
};

struct RecallReport {
  std::vector<std::size_t> ns;
  std::vector<double> recall;
  std::size_t evaluated = 0;
  std::size_t excluded = 0;  // queries with an empty relevant set
};

RecallReport recall_at(const EmbeddingIndex& index, const std::vector<QueryEmbedding>& queries, const GroundTruth& gt,
                       const std::vector<std::size_t>& ns);

/// "N,recall" header then one row per N.
std::string report_csv(const RecallReport& r);

enum class Protocol { s2s, s2t };
Protocol parse_protocol(const std::string& s);

inline const std::vector<std::size_t> kDefaultNs{1, 5, 10, 20};

/// S->S: source test queries vs source test gallery, 25 m rule.
/// S->T: target test queries vs source test gallery, explicit pairs when
/// `pairs` is given, else the 25 m rule.
RecallReport eval_protocol(const head::HeadParams& params, const geo::DatasetIndex& data, geo::FeatureStore& store,
                           Protocol mode, const GroundTruth* pairs = nullptr,
                           const std::vector<std::size_t>& ns = kDefaultNs);

}  // namespace vprda::retrieval
