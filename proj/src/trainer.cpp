#include "vprda/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "vprda/retrieval.hpp"

namespace vprda::trainer {

using geo::DataError;
using geo::Domain;
using geo::GeoRecord;
using geo::Split;

// ---------------------------------------------------------------- config

namespace {

std::size_t parse_count(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw std::invalid_argument(key + ": expected an integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw std::invalid_argument(key + ": expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw std::invalid_argument(key + ": expected a boolean, got '" + v + "'");
}

std::string fmt_real(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& value) {
  if (key == "lr") lr = parse_real(key, value);
  else if (key == "batch_tuples") batch_tuples = parse_count(key, value);
  else if (key == "positives") positives = parse_count(key, value);
  else if (key == "epochs") epochs = parse_count(key, value);
  else if (key == "neg_sample") neg_sample = parse_count(key, value);
  else if (key == "neg_keep") neg_keep = parse_count(key, value);
  else if (key == "margin") margin = parse_real(key, value);
  else if (key == "alpha") alpha = parse_real(key, value);
  else if (key == "radius") radius_m = parse_real(key, value);
  else if (key == "refresh_every") refresh_every = parse_count(key, value);
  else if (key == "clusters") clusters = parse_count(key, value);
  else if (key == "mode") mode = head::parse_mode(value);
  else if (key == "norm") norm = head::parse_normalization(value);
  else if (key == "estimator") {
    if (value == "biased") estimator = losses::Estimator::biased;
    else if (value == "unbiased") estimator = losses::Estimator::unbiased;
    else throw std::invalid_argument("estimator: expected biased or unbiased, got '" + value + "'");
  } else if (key == "mmd_samples") mmd_samples = parse_count(key, value);
  else if (key == "mmd_target_images") mmd_target_images = parse_count(key, value);
  else if (key == "augment") augment = parse_bool(key, value);
  else if (key == "crop_min") crop_min = parse_real(key, value);
  else if (key == "crop_max") crop_max = parse_real(key, value);
  else if (key == "kmeans_iters") kmeans_iters = parse_count(key, value);
  else if (key == "kmeans_images") kmeans_images = parse_count(key, value);
  else if (key == "seed") seed = parse_count(key, value);
  else throw std::invalid_argument("unknown config key '" + key + "'");
}

std::vector<std::pair<std::string, std::string>> TrainConfig::items() const {
  return {{"lr", fmt_real(lr)},
          {"batch_tuples", std::to_string(batch_tuples)},
          {"positives", std::to_string(positives)},
          {"epochs", std::to_string(epochs)},
          {"neg_sample", std::to_string(neg_sample)},
          {"neg_keep", std::to_string(neg_keep)},
          {"margin", fmt_real(margin)},
          {"alpha", fmt_real(alpha)},
          {"radius", fmt_real(radius_m)},
          {"refresh_every", std::to_string(refresh_every)},
          {"clusters", std::to_string(clusters)},
          {"mode", head::to_string(mode)},
          {"norm", head::to_string(norm)},
          {"estimator", estimator == losses::Estimator::biased ? "biased" : "unbiased"},
          {"mmd_samples", std::to_string(mmd_samples)},
          {"mmd_target_images", std::to_string(mmd_target_images)},
          {"augment", augment ? "true" : "false"},
          {"crop_min", fmt_real(crop_min)},
          {"crop_max", fmt_real(crop_max)},
          {"kmeans_iters", std::to_string(kmeans_iters)},
          {"kmeans_images", std::to_string(kmeans_images)},
          {"seed", std::to_string(seed)}};
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (batch_tuples == 0 || positives == 0 || neg_sample == 0 || neg_keep == 0 || clusters == 0)
    throw std::invalid_argument("batch_tuples, positives, neg_sample, neg_keep and clusters must be positive");
  if (neg_keep > neg_sample) throw std::invalid_argument("neg_keep must not exceed neg_sample");
  if (!(margin > 0.0)) throw std::invalid_argument("margin must be positive");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
  if (!(radius_m > 0.0)) throw std::invalid_argument("radius must be positive");
  if (refresh_every == 0) throw std::invalid_argument("refresh_every must be positive");
  if (mmd_samples < 2 || mmd_target_images == 0) throw std::invalid_argument("mmd_samples >= 2 and mmd_target_images >= 1 required");
  if (!(crop_min > 0.0 && crop_min <= crop_max && crop_max <= 1.0)) throw std::invalid_argument("need 0 < crop_min <= crop_max <= 1");
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig cfg) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  const std::string text = ss.str();
  const std::string head = trim(text);
  if (!head.empty() && head.front() == '{') {
    const auto j = nlohmann::json::parse(text);
    for (const auto& [k, v] : j.items()) cfg.set(k, v.is_string() ? v.get<std::string>() : v.dump());
    return cfg;
  }
  std::istringstream lines(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    try {
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

// ---------------------------------------------------------------- Adam

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& st, double lr) {
  if (params.size() != grads.size()) throw DimensionError("adam_step: parameter/gradient count mismatch");
  if (st.m.empty()) {
    for (const Tensor* p : params) {
      st.m.emplace_back(p->shape());
      st.v.emplace_back(p->shape());
    }
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor& p = *params[t];
    const Tensor& g = grads[t];
    if (g.size() != p.size()) throw DimensionError("adam_step: gradient shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      st.m[t][i] = st.beta1 * st.m[t][i] + (1.0 - st.beta1) * g[i];
      st.v[t][i] = st.beta2 * st.v[t][i] + (1.0 - st.beta2) * g[i] * g[i];
      const double mhat = st.m[t][i] / c1;
      const double vhat = st.v[t][i] / c2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + st.eps);
    }
  }
}

// ---------------------------------------------------------------- mining

void MiningCache::refresh(const head::HeadParams& params, const std::vector<std::string>& ids, geo::FeatureStore& store) {
  std::vector<const Tensor*> maps;
  maps.reserve(ids.size());
  for (const auto& id : ids) maps.push_back(&store.get(id));
  auto emb = head::embed_batch(maps, params);
  std::unordered_map<std::string, Tensor> fresh;
  for (std::size_t i = 0; i < ids.size(); ++i) fresh.emplace(ids[i], std::move(emb[i]));
  assign(std::move(fresh));
}

void MiningCache::assign(std::unordered_map<std::string, Tensor> embeddings) {
  emb_ = std::move(embeddings);
  age_ = 0;
  ++refreshes_;
}

const Tensor& MiningCache::embedding(const std::string& id) const {
  auto it = emb_.find(id);
  if (it == emb_.end()) throw DataError("mining cache has no embedding for '" + id + "'");
  return it->second;
}

std::variant<MinedTuple, SkipReason> mine_tuple(const GeoRecord& q, const MiningCache& cache,
                                                 const std::vector<const GeoRecord*>& gallery, const TrainConfig& cfg,
                                                 std::mt19937_64& rng) {
  if (!q.pos) return SkipReason::no_positives;
  auto pos = geo::potential_positives(q, gallery, cfg.radius_m);
  std::erase(pos, q.id);
  if (pos.empty()) return SkipReason::no_positives;
  if (pos.size() > cfg.positives) pos.resize(cfg.positives);

  std::vector<const std::string*> pool;
  for (const auto* g : gallery)
    if (g->pos && g->id != q.id && geo::haversine_m(*q.pos, *g->pos) > cfg.radius_m) pool.push_back(&g->id);
  if (pool.empty()) return SkipReason::no_negatives;

  MinedTuple t;
  t.query = q.id;
  t.positives = std::move(pos);
  std::vector<const std::string*> drawn;
  std::sample(pool.begin(), pool.end(), std::back_inserter(drawn), std::min(cfg.neg_sample, pool.size()), rng);
  const Tensor& qe = cache.embedding(q.id);
  std::vector<std::pair<double, const std::string*>> ranked;
  ranked.reserve(drawn.size());
  for (const auto* id : drawn) {
    const Tensor& e = cache.embedding(*id);
    double d = 0.0;
    for (std::size_t j = 0; j < e.size(); ++j) d += (qe[j] - e[j]) * (qe[j] - e[j]);
    ranked.emplace_back(d, id);
    t.sampled.push_back(*id);
  }
  const std::size_t keep = std::min(cfg.neg_keep, ranked.size());
  std::partial_sort(ranked.begin(), ranked.begin() + static_cast<long>(keep), ranked.end(),
                    [](const auto& a, const auto& b) { return a.first != b.first ? a.first < b.first : *a.second < *b.second; });
  for (std::size_t i = 0; i < keep; ++i) t.negatives.push_back(*ranked[i].second);
  return t;
}

// ---------------------------------------------------------------- batches

Tensor random_crop(const Tensor& fm, double crop_min, double crop_max, std::mt19937_64& rng) {
  const std::size_t h = fm.dim(0), w = fm.dim(1), d = fm.dim(2);
  std::uniform_real_distribution<double> frac(crop_min, crop_max);
  const double f = frac(rng);
  const auto ch = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(f * static_cast<double>(h))), 1, h);
  const auto cw = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(f * static_cast<double>(w))), 1, w);
  const std::size_t y0 = std::uniform_int_distribution<std::size_t>(0, h - ch)(rng);
  const std::size_t x0 = std::uniform_int_distribution<std::size_t>(0, w - cw)(rng);
  Tensor out({ch, cw, d});
  for (std::size_t y = 0; y < ch; ++y)
    for (std::size_t x = 0; x < cw; ++x)
      std::copy_n(fm.data().begin() + static_cast<long>(((y0 + y) * w + x0 + x) * d), d,
                  out.data().begin() + static_cast<long>((y * cw + x) * d));
  return out;
}

namespace {

Var pooled_descriptors(std::vector<Var> maps) {
  for (auto& m : maps) m = ops::reshape(m, {m.shape()[0] * m.shape()[1], m.shape()[2]});
  return ops::concat_rows(maps);
}

std::vector<std::size_t> subsample_rows(std::size_t total, std::size_t limit, std::mt19937_64& rng) {
  std::vector<std::size_t> rows(total);
  std::iota(rows.begin(), rows.end(), 0);
  if (total <= limit) return rows;
  std::vector<std::size_t> out;
  std::sample(rows.begin(), rows.end(), std::back_inserter(out), limit, rng);
  return out;
}

std::size_t locations(const Tensor& fm) { return fm.dim(0) * fm.dim(1); }

}  // namespace

BatchLoss batch_loss(const head::HeadParams& params, const Batch& batch, const TrainConfig& cfg,
                     const std::vector<double>& bandwidths) {
  BatchLoss out;
  out.vars.emplace(params);
  const head::HeadVars& hv = *out.vars;
  std::vector<Var> adapted;
  for (std::size_t t = 0; t < batch.tuples.size(); ++t) {
    const auto& tup = batch.tuples[t];
    const std::size_t off = batch.tuple_offsets[t];
    std::vector<Var> emb;
    for (std::size_t i = 0; i < 1 + tup.positives.size() + tup.negatives.size(); ++i) {
      const auto f = head::embed_graph(leaf(batch.tuple_maps[off + i]), hv);
      adapted.push_back(f.adapted);
      emb.push_back(f.embedding);
    }
    const std::span<const Var> all(emb);
    const Var lr = losses::triplet_loss(emb[0], all.subspan(1, tup.positives.size()),
                                        all.subspan(1 + tup.positives.size()), cfg.margin);
    out.ranking = out.ranking ? ops::add(out.ranking, lr) : lr;
  }
  if (!out.ranking) throw std::invalid_argument("batch_loss: empty batch");
  if (cfg.alpha > 0.0 && !batch.target_maps.empty()) {
    std::vector<Var> target;
    for (const auto& m : batch.target_maps) target.push_back(head::adapter(leaf(m), hv));
    losses::MmdConfig mc;
    mc.bandwidths = bandwidths;
    mc.weights.assign(bandwidths.size(), 1.0 / static_cast<double>(bandwidths.size()));
    mc.estimator = cfg.estimator;
    mc.alpha = cfg.alpha;
    const Var xs = ops::gather_rows(pooled_descriptors(adapted), batch.source_rows);
    const Var xt = ops::gather_rows(pooled_descriptors(target), batch.target_rows);
    out.mmd = losses::mk_mmd(xs, xt, mc);
  } else {
    out.mmd = leaf(Tensor::scalar(0.0));
  }
  out.combined = losses::combined_loss(out.ranking, out.mmd, cfg.alpha);
  return out;
}

BatchLoss train_step(head::HeadParams& params, const Batch& batch, const TrainConfig& cfg,
                     const std::vector<double>& bandwidths, AdamState& adam, double lr) {
  BatchLoss loss = batch_loss(params, batch, cfg, bandwidths);
  if (!std::isfinite(loss.combined.item())) {
    std::string ids;
    for (const auto& t : batch.tuples) {
      ids += " " + t.query;
      for (const auto& p : t.positives) ids += " " + p;
      for (const auto& n : t.negatives) ids += " " + n;
    }
    for (const auto& t : batch.target_ids) ids += " " + t;
    throw TrainingError("non-finite loss (L_r=" + std::to_string(loss.ranking.item()) +
                        ", M=" + std::to_string(loss.mmd.item()) + ") on batch:" + ids);
  }
  backward(loss.combined);
  std::vector<Tensor> grads;
  for (const auto& v : loss.vars->all()) grads.push_back(v.grad());
  auto tensors = params.tensors();
  adam_step(tensors, grads, adam, lr);
  return loss;
}

// ---------------------------------------------------------------- train

namespace {

Tensor adapted_sample(const head::HeadParams& p, const std::vector<const Tensor*>& maps, std::size_t limit,
                      std::mt19937_64& rng) {
  std::vector<Tensor> adapted(maps.size());
  const long n = static_cast<long>(maps.size());
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < n; ++i) adapted[static_cast<std::size_t>(i)] = head::adapter(*maps[static_cast<std::size_t>(i)], p);
  const std::size_t d = p.dim();
  std::size_t total = 0;
  for (const auto& a : adapted) total += locations(a);
  Tensor pooled({total, d});
  std::size_t off = 0;
  for (const auto& a : adapted) {
    std::copy(a.data().begin(), a.data().end(), pooled.data().begin() + static_cast<long>(off));
    off += a.size();
  }
  if (total <= limit) return pooled;
  const auto rows = subsample_rows(total, limit, rng);
  Tensor out({rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy_n(pooled.data().begin() + static_cast<long>(rows[r] * d), d, out.data().begin() + static_cast<long>(r * d));
  return out;
}

std::vector<const Tensor*> maps_for(const std::vector<std::string>& ids, geo::FeatureStore& store) {
  std::vector<const Tensor*> out;
  for (const auto& id : ids) out.push_back(&store.get(id));
  return out;
}

template <typename T>
std::vector<T> draw(const std::vector<T>& from, std::size_t n, std::mt19937_64& rng) {
  std::vector<T> out;
  std::sample(from.begin(), from.end(), std::back_inserter(out), std::min(n, from.size()), rng);
  return out;
}

double probe_mmd(const head::HeadParams& p, const std::vector<const Tensor*>& src, const std::vector<const Tensor*>& tgt,
                 std::size_t samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Tensor xs = adapted_sample(p, src, samples, rng);
  const Tensor xt = adapted_sample(p, tgt, samples, rng);
  Tensor pooled({rows_of(xs) + rows_of(xt), cols_of(xs)});
  std::copy(xs.data().begin(), xs.data().end(), pooled.data().begin());
  std::copy(xt.data().begin(), xt.data().end(), pooled.data().begin() + static_cast<long>(xs.size()));
  losses::MmdConfig mc;
  mc.bandwidths = losses::median_bandwidths(pooled).values;
  return losses::mk_mmd(xs, xt, mc);
}

std::pair<double, double> validation_recall(const head::HeadParams& p, const geo::DatasetIndex& data,
                                            geo::FeatureStore& store) {
  const auto gallery = data.ids(Split::train_gallery, Domain::source);
  const auto queries = data.ids(Split::train_query, Domain::source);
  std::vector<GeoRecord> grec;
  for (const auto& id : gallery) grec.push_back(data.at(id));
  const auto index = retrieval::build_index(head::embed_batch(maps_for(gallery, store), p), grec);
  auto qemb = head::embed_batch(maps_for(queries, store), p);
  std::vector<retrieval::QueryEmbedding> qs;
  for (std::size_t i = 0; i < queries.size(); ++i) qs.push_back({data.at(queries[i]), std::move(qemb[i])});
  const auto rep = retrieval::recall_at(index, qs, retrieval::GroundTruth::geo_radius(), {1, 5});
  return {rep.recall[0], rep.recall[1]};
}

}  // namespace

head::HeadParams initial_params(const geo::DatasetIndex& data, geo::FeatureStore& store, const TrainConfig& cfg) {
  const auto gallery = data.ids(Split::train_gallery, Domain::source);
  if (gallery.empty()) throw DataError("dataset has no source training gallery");
  std::mt19937_64 rng(cfg.seed);
  const std::size_t din = store.get(gallery.front()).dim(2);
  head::HeadParams p = head::init_params(din, din, cfg.clusters, cfg.mode, cfg.norm, rng);
  const auto picked = draw(gallery, cfg.kmeans_images, rng);
  const Tensor sample = adapted_sample(p, maps_for(picked, store), std::max<std::size_t>(cfg.clusters * 100, 1000), rng);
  if (rows_of(sample) < cfg.clusters)
    throw DataError("not enough training descriptors (" + std::to_string(rows_of(sample)) + ") for " +
                    std::to_string(cfg.clusters) + " clusters");
  head::init_clusters(p, sample, rng(), cfg.kmeans_iters);
  return p;
}

std::string metrics_csv(const std::vector<EpochMetrics>& metrics) {
  std::ostringstream os;
  os << "epoch,L_r,M,L_u,R@1,R@5,skipped_queries\n";
  os << std::setprecision(8);
  for (const auto& m : metrics)
    os << m.epoch << ',' << m.ranking << ',' << m.mmd << ',' << m.combined << ',' << m.r1 << ',' << m.r5 << ','
       << m.skipped << '\n';
  return os.str();
}

TrainResult train(const geo::DatasetIndex& data, geo::FeatureStore& store, const TrainConfig& cfg,
                  const std::optional<std::filesystem::path>& out_dir, const LogFn& log) {
  cfg.validate();
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  const auto queries = data.ids(Split::train_query, Domain::source);
  const auto gallery_ids = data.ids(Split::train_gallery, Domain::source);
  if (queries.empty() || gallery_ids.empty()) throw DataError("dataset needs source train_query and train_gallery records");
  const auto target_ids = data.ids(Split::train_gallery, Domain::target);
  const bool use_target = cfg.alpha > 0.0 && !target_ids.empty();
  const double alpha = use_target ? cfg.alpha : 0.0;
  if (cfg.alpha > 0.0 && target_ids.empty()) say("no target training split; training with alpha = 0");
  TrainConfig run_cfg = cfg;
  run_cfg.alpha = alpha;

  std::vector<std::string> source_ids = queries;
  source_ids.insert(source_ids.end(), gallery_ids.begin(), gallery_ids.end());
  store.preload(source_ids);
  if (use_target) store.preload(target_ids);

  std::vector<const GeoRecord*> gallery;
  for (const auto& id : gallery_ids) gallery.push_back(&data.at(id));

  TrainResult res;
  head::HeadParams params = initial_params(data, store, run_cfg);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  std::vector<const Tensor*> probe_src, probe_tgt;
  if (use_target) {
    probe_src = maps_for(draw(gallery_ids, 32, rng), store);
    probe_tgt = maps_for(draw(target_ids, 32, rng), store);
    res.probe_mmd_initial = probe_mmd(params, probe_src, probe_tgt, run_cfg.mmd_samples, cfg.seed);
    say("probe MK-MMD before training: " + std::to_string(res.probe_mmd_initial));
  }

  MiningCache cache(cfg.refresh_every);
  std::vector<double> bandwidths;
  auto refresh = [&] {
    cache.refresh(params, source_ids, store);
    if (use_target) {
      const Tensor xs = adapted_sample(params, maps_for(draw(gallery_ids, 16, rng), store), run_cfg.mmd_samples, rng);
      const Tensor xt = adapted_sample(params, maps_for(draw(target_ids, 16, rng), store), run_cfg.mmd_samples, rng);
      Tensor pooled({rows_of(xs) + rows_of(xt), cols_of(xs)});
      std::copy(xs.data().begin(), xs.data().end(), pooled.data().begin());
      std::copy(xt.data().begin(), xt.data().end(), pooled.data().begin() + static_cast<long>(xs.size()));
      bandwidths = losses::median_bandwidths(pooled).values;
    }
  };
  refresh();

  AdamState adam;
  double best_r5 = -1.0;
  std::vector<std::string> order = queries;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochMetrics em;
    em.epoch = epoch;
    std::size_t steps = 0;
    std::size_t next = 0;
    while (next < order.size()) {
      Batch batch;
      while (batch.tuples.size() < cfg.batch_tuples && next < order.size()) {
        if (cache.stale()) refresh();
        const GeoRecord& q = data.at(order[next++]);
        auto mined = mine_tuple(q, cache, gallery, run_cfg, rng);
        cache.tick();
        res.max_cache_age = std::max(res.max_cache_age, cache.age());
        if (std::holds_alternative<SkipReason>(mined)) {
          ++em.skipped;
          continue;
        }
        auto& t = std::get<MinedTuple>(mined);
        ++res.tuples_mined;
        batch.tuple_offsets.push_back(batch.tuple_maps.size());
        auto add_map = [&](const std::string& id) {
          const Tensor& fm = store.get(id);
          batch.tuple_maps.push_back(cfg.augment ? random_crop(fm, cfg.crop_min, cfg.crop_max, rng) : fm);
        };
        add_map(t.query);
        for (const auto& id : t.positives) add_map(id);
        for (const auto& id : t.negatives) add_map(id);
        batch.tuples.push_back(std::move(t));
      }
      if (batch.tuples.empty()) continue;
      if (use_target) {
        batch.target_ids = draw(target_ids, cfg.mmd_target_images, rng);
        for (const auto& id : batch.target_ids) batch.target_maps.push_back(store.get(id));
        std::size_t src_total = 0, tgt_total = 0;
        for (const auto& m : batch.tuple_maps) src_total += locations(m);
        for (const auto& m : batch.target_maps) tgt_total += locations(m);
        batch.source_rows = subsample_rows(src_total, cfg.mmd_samples, rng);
        batch.target_rows = subsample_rows(tgt_total, cfg.mmd_samples, rng);
      }
      const BatchLoss loss = train_step(params, batch, run_cfg, bandwidths, adam, cfg.lr);
      em.ranking += loss.ranking.item();
      em.mmd += loss.mmd.item();
      em.combined += loss.combined.item();
      ++steps;
    }
    if (steps) {
      em.ranking /= static_cast<double>(steps);
      em.mmd /= static_cast<double>(steps);
      em.combined /= static_cast<double>(steps);
    }
    std::tie(em.r1, em.r5) = validation_recall(params, data, store);
    res.metrics.push_back(em);
    std::ostringstream line;
    line << "epoch " << epoch << ": L_r=" << em.ranking << " M=" << em.mmd << " L_u=" << em.combined
         << " R@1=" << em.r1 << " R@5=" << em.r5 << " skipped=" << em.skipped;
    say(line.str());
    if (em.r5 >= best_r5) {
      best_r5 = em.r5;
      res.best = params;
      res.best_epoch = epoch;
    }
  }
  res.last = params;
  if (cfg.epochs == 0) res.best = params;
  if (use_target) {
    res.probe_mmd_final = probe_mmd(params, probe_src, probe_tgt, run_cfg.mmd_samples, cfg.seed);
    say("probe MK-MMD after training: " + std::to_string(res.probe_mmd_final));
  }
  res.target_reads = store.reads(Domain::target);

  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    head::save_checkpoint(res.best, *out_dir / "best.ckpt");
    head::save_checkpoint(res.last, *out_dir / "last.ckpt");
    std::ofstream os(*out_dir / "metrics.csv");
    os << metrics_csv(res.metrics);
    if (!os) throw DataError("cannot write metrics to " + out_dir->string());
  }
  return res;
}

}  // namespace vprda::trainer
