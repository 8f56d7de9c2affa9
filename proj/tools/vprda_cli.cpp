// vprda: synth | train | index | query | eval | heatmap
//
// Exit codes: 0 success, 1 usage error, 2 data or contract error.
// Logs go to stderr; machine-readable results go to --out (stdout if omitted
// where noted).

#include <omp.h>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "vprda/geo.hpp"
#include "vprda/head.hpp"
#include "vprda/retrieval.hpp"
#include "vprda/trainer.hpp"

namespace fs = std::filesystem;
using namespace vprda;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void note(const std::string& s) { std::cerr << "[vprda] " << s << '\n'; }

geo::DatasetIndex open_dataset(const fs::path& dir) {
  const fs::path manifest = fs::is_directory(dir) ? dir / "manifest.jsonl" : dir;
  if (!fs::exists(manifest)) throw geo::DataError("no such manifest: " + manifest.string());
  return geo::load_dataset(manifest);
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw geo::DataError(what + " not found: " + p.string());
}

// Writes to `out`, or stdout when empty.
void emit(const std::string& out, const std::string& text) {
  if (out.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream os(out);
  if (!os) throw geo::DataError("cannot write " + out);
  os << text;
}

Tensor resolve_map(const geo::DatasetIndex* data, const std::string& id, const std::string& fmap) {
  if (!fmap.empty()) {
    require_file(fmap, "feature map");
    return geo::read_fmap(fmap);
  }
  if (!data) throw UsageError("need --data with --id, or --fmap");
  return geo::read_fmap(data->fmap_file(data->at(id)));
}

// ---------------------------------------------------------------- index file
// JSON-lines {"id": ..., "embedding": [...]}

void write_index(const fs::path& path, const retrieval::EmbeddingIndex& idx) {
  std::ofstream os(path);
  if (!os) throw geo::DataError("cannot write " + path.string());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    nlohmann::json j;
    j["id"] = idx.ids()[i];
    std::vector<double> row(idx.matrix().data().begin() + static_cast<long>(i * idx.dim()),
                            idx.matrix().data().begin() + static_cast<long>((i + 1) * idx.dim()));
    j["embedding"] = row;
    os << j.dump() << '\n';
  }
}

retrieval::EmbeddingIndex read_index(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw geo::DataError("cannot open index " + path.string());
  std::vector<Tensor> emb;
  std::vector<geo::GeoRecord> recs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      auto v = j.at("embedding").get<std::vector<double>>();
      const std::size_t n = v.size();
      emb.emplace_back(Shape{n}, std::move(v));
      geo::GeoRecord r;
      r.id = j.at("id").get<std::string>();
      recs.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw geo::DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return retrieval::build_index(emb, recs);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-aware VLAD descriptors with domain adaptation for place recognition"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker thread cap (0 = OpenMP default)");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate the synthetic two-domain benchmark");
  geo::SynthConfig sc;
  std::string synth_out;
  synth->add_option("--out", synth_out, "Output dataset directory")->required();
  synth->add_option("--places", sc.n_places, "Number of places");
  synth->add_option("--views", sc.views_per_place, "Source views per place");
  synth->add_option("--target-views", sc.target_views_per_place, "Target views per place");
  synth->add_option("--height", sc.height, "Feature map height");
  synth->add_option("--width", sc.width, "Feature map width");
  synth->add_option("--channels", sc.channels, "Feature map channels");
  synth->add_option("--shift", sc.shift, "Domain-shift strength");
  synth->add_option("--signature-fraction", sc.signature_fraction, "Fraction of locations with place content");
  synth->add_option("--noise", sc.noise, "Per-value noise");
  synth->add_option("--target-noise", sc.target_noise, "Extra target noise (scaled by shift)");
  synth->add_option("--outlier-prob", sc.outlier_prob, "Target outlier probability (scaled by min(shift, 1))");
  synth->add_option("--seed", sc.seed, "Random seed");

  // train
  auto* train = app.add_subcommand("train", "Train a descriptor head");
  std::string train_data, train_config, train_out;
  train->add_option("--data", train_data, "Dataset directory or manifest")->required();
  train->add_option("--config", train_config, "Config file (JSON object or key=value lines)");
  train->add_option("--out", train_out, "Run directory (best.ckpt, last.ckpt, metrics.csv)")->required();
  std::map<std::string, std::string> flag_values;
  for (const auto& [key, def] : trainer::TrainConfig{}.items()) {
    flag_values[key] = def;
    train->add_option("--" + key, flag_values[key], "Config key '" + key + "'");
  }

  // index
  auto* index = app.add_subcommand("index", "Embed a split and write an index file");
  std::string idx_ckpt, idx_data, idx_out, idx_split = "test_gallery", idx_domain = "source";
  index->add_option("--checkpoint", idx_ckpt, "Checkpoint")->required();
  index->add_option("--data", idx_data, "Dataset directory or manifest")->required();
  index->add_option("--split", idx_split, "Split to index");
  index->add_option("--domain", idx_domain, "Domain to index");
  index->add_option("--out", idx_out, "Index file (JSON lines)")->required();

  // query
  auto* query = app.add_subcommand("query", "Rank an index against one query");
  std::string q_ckpt, q_index, q_data, q_id, q_fmap, q_out;
  std::size_t q_top = 10;
  query->add_option("--checkpoint", q_ckpt, "Checkpoint")->required();
  query->add_option("--index", q_index, "Index file")->required();
  query->add_option("--data", q_data, "Dataset (with --id)");
  query->add_option("--id", q_id, "Query id in the dataset");
  query->add_option("--fmap", q_fmap, "Query FMAP1 file");
  query->add_option("--top", q_top, "Results to return");
  query->add_option("--out", q_out, "Result CSV (stdout if omitted)");

  // eval
  auto* eval = app.add_subcommand("eval", "Recall@N under the S->S or S->T protocol");
  std::string e_ckpt, e_data, e_mode = "s2s", e_pairs, e_out;
  eval->add_option("--checkpoint", e_ckpt, "Checkpoint")->required();
  eval->add_option("--data", e_data, "Dataset directory or manifest")->required();
  eval->add_option("--mode", e_mode, "s2s or s2t")->check(CLI::IsMember({"s2s", "s2t"}));
  eval->add_option("--pairs", e_pairs, "Pair labels for s2t (default: <data>/gt_pairs.jsonl when present)");
  eval->add_option("--out", e_out, "Report CSV (stdout if omitted)");

  // heatmap
  auto* heat = app.add_subcommand("heatmap", "Write an attention map as binary PGM");
  std::string h_ckpt, h_data, h_id, h_fmap, h_out;
  heat->add_option("--checkpoint", h_ckpt, "Checkpoint")->required();
  heat->add_option("--data", h_data, "Dataset (with --id)");
  heat->add_option("--id", h_id, "Image id in the dataset");
  heat->add_option("--fmap", h_fmap, "FMAP1 file");
  heat->add_option("--out", h_out, "Output .pgm")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  if (threads > 0) omp_set_num_threads(threads);

  try {
    if (synth->parsed()) {
      const auto s = geo::synth_generate(sc, synth_out);
      note("wrote " + std::to_string(s.source_records) + " source and " + std::to_string(s.target_records) +
          " target records (" + std::to_string(s.outliers) + " outliers) to " + synth_out);
    } else if (train->parsed()) {
      trainer::TrainConfig cfg;
      if (!train_config.empty()) {
        require_file(train_config, "config file");
        cfg = trainer::load_config(train_config, cfg);
      }
      for (const auto& [key, value] : flag_values)
        if (train->count("--" + key)) cfg.set(key, value);
      const auto data = open_dataset(train_data);
      geo::FeatureStore store(data);
      const auto res = trainer::train(data, store, cfg, fs::path(train_out), note);
      note("best epoch " + std::to_string(res.best_epoch) + "; checkpoints in " + train_out);
    } else if (index->parsed()) {
      require_file(idx_ckpt, "checkpoint");
      const auto params = head::load_checkpoint(idx_ckpt);
      const auto data = open_dataset(idx_data);
      geo::FeatureStore store(data);
      const auto ids = data.ids(geo::parse_split(idx_split), geo::parse_domain(idx_domain));
      if (ids.empty()) throw geo::DataError("no records in split " + idx_split + " / " + idx_domain);
      store.preload(ids);
      std::vector<const Tensor*> maps;
      std::vector<geo::GeoRecord> recs;
      for (const auto& id : ids) {
        maps.push_back(&store.get(id));
        recs.push_back(data.at(id));
      }
      write_index(idx_out, retrieval::build_index(head::embed_batch(maps, params), recs));
      note("indexed " + std::to_string(ids.size()) + " images");
    } else if (query->parsed()) {
      require_file(q_ckpt, "checkpoint");
      require_file(q_index, "index");
      if (q_id.empty() == q_fmap.empty()) throw UsageError("give exactly one of --id or --fmap");
      const auto params = head::load_checkpoint(q_ckpt);
      std::optional<geo::DatasetIndex> data;
      if (!q_data.empty()) data = open_dataset(q_data);
      const Tensor fm = resolve_map(data ? &*data : nullptr, q_id, q_fmap);
      const auto idx = read_index(q_index);
      const auto hits = retrieval::top_n(idx, head::embed(fm, params).embedding, q_top);
      std::ostringstream os;
      os << "rank,id,distance\n" << std::setprecision(10);
      for (std::size_t i = 0; i < hits.size(); ++i) os << i + 1 << ',' << hits[i].id << ',' << hits[i].distance << '\n';
      emit(q_out, os.str());
    } else if (eval->parsed()) {
      require_file(e_ckpt, "checkpoint");
      const auto params = head::load_checkpoint(e_ckpt);
      const auto data = open_dataset(e_data);
      geo::FeatureStore store(data);
      const auto mode = retrieval::parse_protocol(e_mode);
      std::optional<retrieval::GroundTruth> pairs;
      if (mode == retrieval::Protocol::s2t) {
        fs::path p = e_pairs;
        if (p.empty() && fs::exists(data.root() / "gt_pairs.jsonl")) p = data.root() / "gt_pairs.jsonl";
        if (!p.empty()) {
          require_file(p, "pair labels");
          pairs = retrieval::load_pairs(p);
        }
      }
      const auto rep = retrieval::eval_protocol(params, data, store, mode, pairs ? &*pairs : nullptr);
      note("evaluated " + std::to_string(rep.evaluated) + " queries (" + std::to_string(rep.excluded) +
          " without relevant images excluded)");
      emit(e_out, retrieval::report_csv(rep));
    } else if (heat->parsed()) {
      require_file(h_ckpt, "checkpoint");
      if (h_id.empty() == h_fmap.empty()) throw UsageError("give exactly one of --id or --fmap");
      const auto params = head::load_checkpoint(h_ckpt);
      std::optional<geo::DatasetIndex> data;
      if (!h_data.empty()) data = open_dataset(h_data);
      head::export_heatmap(resolve_map(data ? &*data : nullptr, h_id, h_fmap), params, h_out);
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
