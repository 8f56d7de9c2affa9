#include "vprda/retrieval.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "vprda/kernels.hpp"

namespace vprda::retrieval {

using geo::DataError;

const geo::GeoRecord* EmbeddingIndex::record(const std::string& id) const {
  auto it = meta_.find(id);
  return it == meta_.end() ? nullptr : &it->second;
}

EmbeddingIndex build_index(const std::vector<Tensor>& embeddings, const std::vector<geo::GeoRecord>& records) {
  if (embeddings.size() != records.size()) throw DimensionError("build_index: embeddings and records differ in count");
  EmbeddingIndex idx;
  if (embeddings.empty()) return idx;
  idx.dim_ = embeddings.front().size();
  idx.matrix_ = Tensor({embeddings.size(), idx.dim_});
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    const auto& e = embeddings[i];
    if (e.size() != idx.dim_) throw DimensionError("build_index: embedding lengths differ");
    if (!idx.row_.emplace(records[i].id, i).second) throw DataError("build_index: duplicate id '" + records[i].id + "'");
    double sq = 0.0;
    for (double v : e.data()) sq += v * v;
    const double norm = std::max(std::sqrt(sq), 1e-12);
    for (std::size_t j = 0; j < idx.dim_; ++j) idx.matrix_[i * idx.dim_ + j] = e[j] / norm;
    idx.ids_.push_back(records[i].id);
    idx.meta_.emplace(records[i].id, records[i]);
  }
  return idx;
}

std::vector<Hit> top_n(const EmbeddingIndex& index, const Tensor& query, std::size_t n) {
  if (n == 0) throw std::invalid_argument("top_n: N must be >= 1");
  const std::size_t rows = index.size();
  if (rows == 0) return {};
  if (query.size() != index.dim()) throw DimensionError("top_n: query length differs from index dimension");
  std::vector<double> dist(rows);
  kernels::pairwise_sq_dist(query.data(), index.matrix().data(), dist, 1, rows, index.dim());
  std::vector<std::size_t> order(rows);
  for (std::size_t i = 0; i < rows; ++i) order[i] = i;
  const auto& ids = index.ids();
  const std::size_t k = std::min(n, rows);
  std::partial_sort(order.begin(), order.begin() + static_cast<long>(k), order.end(), [&](std::size_t a, std::size_t b) {
    return dist[a] != dist[b] ? dist[a] < dist[b] : ids[a] < ids[b];
  });
  std::vector<Hit> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back({ids[order[i]], dist[order[i]]});
  return out;
}

GroundTruth GroundTruth::explicit_pairs(std::map<std::string, std::set<std::string>> pairs) {
  GroundTruth g;
  g.pairs_ = std::move(pairs);
  return g;
}

void GroundTruth::validate(const EmbeddingIndex& index) const {
  for (const auto& [q, rel] : pairs_)
    for (const auto& id : rel)
      if (!index.contains(id)) throw DataError("ground truth for '" + q + "' lists unknown gallery id '" + id + "'");
}

std::set<std::string> GroundTruth::relevant(const geo::GeoRecord& query, const EmbeddingIndex& index) const {
  if (!radius_) {
    auto it = pairs_.find(query.id);
    return it == pairs_.end() ? std::set<std::string>{} : it->second;
  }
  std::set<std::string> out;
  if (!query.pos) return out;
  for (const auto& id : index.ids()) {
    const auto* r = index.record(id);
    if (r && r->pos && geo::haversine_m(*query.pos, *r->pos) <= *radius_) out.insert(id);
  }
  return out;
}

GroundTruth load_pairs(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open pair labels " + path.string());
  std::map<std::string, std::set<std::string>> pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      auto& rel = pairs[j.at("query_id").get<std::string>()];
      for (const auto& id : j.at("relevant_ids")) rel.insert(id.get<std::string>());
    } catch (const std::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return GroundTruth::explicit_pairs(std::move(pairs));
}

RecallReport recall_at(const EmbeddingIndex& index, const std::vector<QueryEmbedding>& queries, const GroundTruth& gt,
                       const std::vector<std::size_t>& ns) {
  if (ns.empty()) throw std::invalid_argument("recall_at: no N values");
  for (auto n : ns)
    if (n == 0) throw std::invalid_argument("recall_at: N must be >= 1");
  gt.validate(index);
  const std::size_t max_n = *std::max_element(ns.begin(), ns.end());
  // rank of the first relevant hit per query (max_n if none in the top max_n), or -1 if excluded
  std::vector<long> first_hit(queries.size(), -1);
  const long nq = static_cast<long>(queries.size());
#pragma omp parallel for schedule(dynamic)
  for (long qi = 0; qi < nq; ++qi) {
    const auto& q = queries[static_cast<std::size_t>(qi)];
    const auto rel = gt.relevant(q.record, index);
    if (rel.empty()) continue;
    const auto hits = top_n(index, q.embedding, max_n);
    long rank = static_cast<long>(max_n);
    for (std::size_t r = 0; r < hits.size(); ++r) {
      if (rel.count(hits[r].id)) {
        rank = static_cast<long>(r);
        break;
      }
    }
    first_hit[static_cast<std::size_t>(qi)] = rank;
  }
  RecallReport rep;
  rep.ns = ns;
  rep.recall.assign(ns.size(), 0.0);
  for (long r : first_hit) {
    if (r < 0) {
      ++rep.excluded;
      continue;
    }
    ++rep.evaluated;
    for (std::size_t i = 0; i < ns.size(); ++i)
      if (r < static_cast<long>(ns[i])) rep.recall[i] += 1.0;
  }
  if (rep.evaluated)
    for (auto& v : rep.recall) v /= static_cast<double>(rep.evaluated);
  return rep;
}

std::string report_csv(const RecallReport& r) {
  std::ostringstream os;
  os << "N,recall\n";
  for (std::size_t i = 0; i < r.ns.size(); ++i) os << r.ns[i] << ',' << std::fixed << std::setprecision(4) << r.recall[i] << '\n';
  return os.str();
}

Protocol parse_protocol(const std::string& s) {
  if (s == "s2s") return Protocol::s2s;
  if (s == "s2t") return Protocol::s2t;
  throw std::invalid_argument("unknown evaluation mode '" + s + "'");
}

RecallReport eval_protocol(const head::HeadParams& params, const geo::DatasetIndex& data, geo::FeatureStore& store,
                           Protocol mode, const GroundTruth* pairs, const std::vector<std::size_t>& ns) {
  const auto gallery_ids = data.ids(geo::Split::test_gallery, geo::Domain::source);
  const auto query_domain = mode == Protocol::s2s ? geo::Domain::source : geo::Domain::target;
  const auto query_ids = data.ids(geo::Split::test_query, query_domain);
  if (query_ids.empty())
    throw DataError(std::string("dataset has no ") + (mode == Protocol::s2s ? "source" : "target") + " test queries");
  if (gallery_ids.empty()) throw DataError("dataset has no source test gallery");

  auto embed_ids = [&](const std::vector<std::string>& ids) {
    store.preload(ids);
    std::vector<const Tensor*> maps;
    for (const auto& id : ids) maps.push_back(&store.get(id));
    return head::embed_batch(maps, params);
  };
  std::vector<geo::GeoRecord> gallery_records;
  for (const auto& id : gallery_ids) gallery_records.push_back(data.at(id));
  const EmbeddingIndex index = build_index(embed_ids(gallery_ids), gallery_records);

  auto q_emb = embed_ids(query_ids);
  std::vector<QueryEmbedding> queries;
  for (std::size_t i = 0; i < query_ids.size(); ++i) {
    geo::GeoRecord r = data.at(query_ids[i]);
    // Explicit labels replace geo-tags entirely.
    if (mode == Protocol::s2t && pairs) r.pos.reset();
    queries.push_back({std::move(r), std::move(q_emb[i])});
  }
  const GroundTruth geo_rule = GroundTruth::geo_radius();
  const GroundTruth& gt = (mode == Protocol::s2t && pairs) ? *pairs : geo_rule;
  return recall_at(index, queries, gt, ns);
}

}  // namespace vprda::retrieval
