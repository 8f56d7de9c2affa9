#include "vprda/geo.hpp"

#include <omp.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "json.hpp"

namespace vprda::geo {

using nlohmann::json;

double haversine_m(LatLon a, LatLon b) {
  constexpr double rad = std::numbers::pi / 180.0;
  const double dlat = (b.lat - a.lat) * rad;
  const double dlon = (b.lon - a.lon) * rad;
  const double s1 = std::sin(dlat / 2.0);
  const double s2 = std::sin(dlon / 2.0);
  double h = s1 * s1 + std::cos(a.lat * rad) * std::cos(b.lat * rad) * s2 * s2;
  h = std::clamp(h, 0.0, 1.0);
  return 2.0 * kEarthRadiusM * std::asin(std::sqrt(h));
}

std::string to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

std::string to_string(Split s) {
  switch (s) {
    case Split::train_gallery: return "train_gallery";
    case Split::train_query: return "train_query";
    case Split::test_gallery: return "test_gallery";
    case Split::test_query: return "test_query";
  }
  return "";
}

Domain parse_domain(const std::string& s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw DataError("unknown domain '" + s + "'");
}

Split parse_split(const std::string& s) {
  if (s == "train_gallery") return Split::train_gallery;
  if (s == "train_query") return Split::train_query;
  if (s == "test_gallery") return Split::test_gallery;
  if (s == "test_query") return Split::test_query;
  throw DataError("unknown split '" + s + "'");
}

// ---------------------------------------------------------------- FMAP1

namespace {

constexpr std::array<char, 6> kMagic{'F', 'M', 'A', 'P', '1', '\0'};

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

void write_fmap(const std::filesystem::path& path, const Tensor& fm) {
  if (fm.rank() != 3) throw DimensionError("write_fmap: expected H x W x D, got " + shape_str(fm.shape()));
  if (!fm.all_finite()) throw DataError("write_fmap: non-finite value for " + path.string());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os.write(kMagic.data(), kMagic.size());
  for (std::size_t i = 0; i < 3; ++i) put_u32(os, static_cast<std::uint32_t>(fm.dim(i)));
  for (double v : fm.data()) put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  if (!os) throw DataError("write failed: " + path.string());
}

Tensor read_fmap(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open feature map " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  constexpr std::size_t header = 6 + 12;
  if (bytes.size() < header || std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0)
    throw DataError(path.string() + ": not an FMAP1 file");
  const std::size_t h = get_u32(&bytes[6]), w = get_u32(&bytes[10]), d = get_u32(&bytes[14]);
  const std::size_t n = h * w * d;
  if (bytes.size() != header + 4 * n)
    throw DataError(path.string() + ": payload is " + std::to_string(bytes.size() - header) + " bytes, expected " +
                    std::to_string(4 * n));
  Tensor fm({h, w, d});
  for (std::size_t i = 0; i < n; ++i) {
    const float f = std::bit_cast<float>(get_u32(&bytes[header + 4 * i]));
    if (!std::isfinite(f)) throw DataError(path.string() + ": non-finite value at index " + std::to_string(i));
    fm[i] = f;
  }
  return fm;
}

// ---------------------------------------------------------------- manifest

DatasetIndex::DatasetIndex(std::filesystem::path root, std::vector<GeoRecord> records)
    : root_(std::move(root)), records_(std::move(records)) {
  for (std::size_t i = 0; i < records_.size(); ++i) {
    if (!by_id_.emplace(records_[i].id, i).second) throw DataError("duplicate id '" + records_[i].id + "'");
  }
}

const GeoRecord& DatasetIndex::at(const std::string& id) const {
  auto it = by_id_.find(id);
  if (it == by_id_.end()) throw DataError("unknown id '" + id + "'");
  return records_[it->second];
}

std::vector<std::string> DatasetIndex::ids(Split split) const {
  std::vector<std::string> out;
  for (const auto& r : records_)
    if (r.split == split) out.push_back(r.id);
  return out;
}

std::vector<std::string> DatasetIndex::ids(Split split, Domain domain) const {
  std::vector<std::string> out;
  for (const auto& r : records_)
    if (r.split == split && r.domain == domain) out.push_back(r.id);
  return out;
}

namespace {

GeoRecord parse_record(const json& j) {
  GeoRecord r;
  r.id = j.at("id").get<std::string>();
  if (r.id.empty()) throw DataError("empty id");
  const auto& lat = j.at("lat");
  const auto& lon = j.at("lon");
  if (lat.is_null() != lon.is_null()) throw DataError("lat and lon must both be present or both null");
  if (!lat.is_null()) {
    LatLon p{lat.get<double>(), lon.get<double>()};
    if (!(p.lat >= -90.0 && p.lat <= 90.0) || !(p.lon >= -180.0 && p.lon <= 180.0))
      throw DataError("coordinates out of range");
    r.pos = p;
  }
  r.domain = parse_domain(j.at("domain").get<std::string>());
  r.split = parse_split(j.at("split").get<std::string>());
  r.fmap_path = j.at("fmap_path").get<std::string>();
  return r;
}

}  // namespace

DatasetIndex load_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw DataError("cannot open manifest " + manifest_path.string());
  std::vector<GeoRecord> records;
  std::unordered_map<std::string, std::size_t> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    GeoRecord r;
    try {
      r = parse_record(json::parse(line));
    } catch (const std::exception& e) {
      throw DataError(manifest_path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (auto [it, fresh] = seen.emplace(r.id, lineno); !fresh)
      throw DataError(manifest_path.string() + ":" + std::to_string(lineno) + ": duplicate id '" + r.id +
                      "' (first seen on line " + std::to_string(it->second) + ")");
    records.push_back(std::move(r));
  }
  return DatasetIndex(manifest_path.parent_path(), std::move(records));
}

void write_manifest(const std::filesystem::path& path, const std::vector<GeoRecord>& records) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  for (const auto& r : records) {
    json j;
    j["id"] = r.id;
    j["lat"] = r.pos ? json(r.pos->lat) : json(nullptr);
    j["lon"] = r.pos ? json(r.pos->lon) : json(nullptr);
    j["domain"] = to_string(r.domain);
    j["split"] = to_string(r.split);
    j["fmap_path"] = r.fmap_path;
    os << j.dump() << '\n';
  }
}

std::vector<std::string> potential_positives(const GeoRecord& q, const std::vector<const GeoRecord*>& gallery,
                                             double radius_m) {
  if (!q.pos) throw DataError("potential_positives: query '" + q.id + "' has no geo-tag");
  std::vector<std::pair<double, const std::string*>> hits;
  for (const auto* g : gallery) {
    if (!g->pos) continue;
    const double d = haversine_m(*q.pos, *g->pos);
    if (d <= radius_m) hits.emplace_back(d, &g->id);
  }
  std::sort(hits.begin(), hits.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first < b.first : *a.second < *b.second;
  });
  std::vector<std::string> out;
  out.reserve(hits.size());
  for (const auto& h : hits) out.push_back(*h.second);
  return out;
}

// ---------------------------------------------------------------- store

const Tensor& FeatureStore::get(const std::string& id) {
  const GeoRecord& r = data_->at(id);
  (r.domain == Domain::source ? source_reads_ : target_reads_)++;
  {
    std::lock_guard lock(mu_);
    if (auto it = cache_.find(id); it != cache_.end()) return it->second;
  }
  Tensor fm = read_fmap(data_->fmap_file(r));
  std::lock_guard lock(mu_);
  return cache_.try_emplace(id, std::move(fm)).first->second;
}

void FeatureStore::preload(const std::vector<std::string>& ids) {
  std::vector<Tensor> loaded(ids.size());
  std::vector<std::string> errors(ids.size());
  const long n = static_cast<long>(ids.size());
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < n; ++i) {
    try {
      loaded[static_cast<std::size_t>(i)] = read_fmap(data_->fmap_file(data_->at(ids[static_cast<std::size_t>(i)])));
    } catch (const std::exception& e) {
      errors[static_cast<std::size_t>(i)] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw DataError(e);
  std::lock_guard lock(mu_);
  for (std::size_t i = 0; i < ids.size(); ++i) cache_.try_emplace(ids[i], std::move(loaded[i]));
}

// ---------------------------------------------------------------- synth

namespace {

constexpr LatLon kOrigin{52.37, 4.89};
constexpr double kPlaceSpacingM = 150.0;
constexpr double kViewJitterM = 9.0;
constexpr std::size_t kClutterPrototypes = 6;

LatLon offset_m(LatLon p, double north_m, double east_m) {
  constexpr double rad = std::numbers::pi / 180.0;
  const double m_per_deg = kEarthRadiusM * rad;
  return {p.lat + north_m / m_per_deg, p.lon + east_m / (m_per_deg * std::cos(p.lat * rad))};
}

struct World {
  std::vector<std::vector<double>> signatures;  // per place
  std::vector<std::vector<double>> clutter;     // shared prototypes
  std::vector<double> structure;                // shared by all place content
  std::vector<double> style_gain, style_bias;   // target domain shift
};

std::vector<double> gaussian_vec(std::mt19937_64& rng, std::size_t n, double sd) {
  std::normal_distribution<double> nd(0.0, sd);
  std::vector<double> v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

// One view of place p: place content at a random subset of locations, clutter elsewhere.
Tensor render_view(const World& w, std::size_t place, const SynthConfig& cfg, std::mt19937_64& rng) {
  const std::size_t n = cfg.height * cfg.width, d = cfg.channels;
  Tensor fm({cfg.height, cfg.width, d});
  std::vector<std::size_t> cells(n);
  for (std::size_t i = 0; i < n; ++i) cells[i] = i;
  std::shuffle(cells.begin(), cells.end(), rng);
  const auto n_sig = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.signature_fraction * n)));
  std::normal_distribution<double> noise(0.0, cfg.noise);
  std::uniform_int_distribution<std::size_t> pick(0, kClutterPrototypes - 1);
  std::uniform_real_distribution<double> gain(0.5, 1.5);
  for (std::size_t c = 0; c < n; ++c) {
    double* px = fm.data().data() + cells[c] * d;
    if (c < n_sig) {
      for (std::size_t j = 0; j < d; ++j) px[j] = w.structure[j] + w.signatures[place][j];
    } else {
      const auto& proto = w.clutter[pick(rng)];
      const double g = gain(rng);
      for (std::size_t j = 0; j < d; ++j) px[j] = g * proto[j];
    }
    for (std::size_t j = 0; j < d; ++j) px[j] += noise(rng);
  }
  return fm;
}

void apply_style(const World& w, Tensor& fm, double extra_noise, std::mt19937_64& rng) {
  const std::size_t d = w.style_gain.size();
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < fm.size(); ++i) {
    const std::size_t j = i % d;
    fm[i] = w.style_gain[j] * fm[i] + w.style_bias[j] + extra_noise * noise(rng);
  }
}

}  // namespace

SynthSummary synth_generate(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  if (cfg.n_places == 0 || cfg.views_per_place < 2 || cfg.height == 0 || cfg.width == 0 || cfg.channels == 0)
    throw DataError("synth: need n_places >= 1, views >= 2 and non-empty maps");
  if (cfg.shift < 0.0) throw DataError("synth: shift must be non-negative");
  std::filesystem::create_directories(out_dir / "fmaps");

  std::mt19937_64 rng(cfg.seed);
  const std::size_t d = cfg.channels;
  World w;
  w.structure = gaussian_vec(rng, d, 0.5);
  for (std::size_t p = 0; p < cfg.n_places; ++p) w.signatures.push_back(gaussian_vec(rng, d, 1.0));
  for (std::size_t c = 0; c < kClutterPrototypes; ++c) w.clutter.push_back(gaussian_vec(rng, d, cfg.clutter_scale));
  {
    auto g = gaussian_vec(rng, d, 0.5);
    auto b = gaussian_vec(rng, d, 1.0);
    for (std::size_t j = 0; j < d; ++j) {
      w.style_gain.push_back(std::max(0.2, 1.0 + cfg.shift * g[j]));
      w.style_bias.push_back(cfg.shift * b[j]);
    }
  }
  const double target_extra_noise = cfg.shift * cfg.target_noise;
  const double outlier_prob = std::min(1.0, cfg.shift) * cfg.outlier_prob;

  const auto grid = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(cfg.n_places))));
  const std::size_t n_train = (cfg.n_places + 1) / 2;
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<GeoRecord> records;
  std::ofstream pairs(out_dir / "gt_pairs.jsonl");
  if (!pairs) throw DataError("cannot write " + (out_dir / "gt_pairs.jsonl").string());
  SynthSummary summary;

  auto emit = [&](GeoRecord r, const Tensor& fm) {
    r.fmap_path = "fmaps/" + r.id + ".fmap";
    write_fmap(out_dir / r.fmap_path, fm);
    records.push_back(std::move(r));
  };

  for (std::size_t p = 0; p < cfg.n_places; ++p) {
    // Row-major grid: the first half of the places forms a contiguous train region.
    const LatLon anchor = offset_m(kOrigin, static_cast<double>(p / grid) * kPlaceSpacingM,
                                   static_cast<double>(p % grid) * kPlaceSpacingM);
    const bool train = p < n_train;
    auto jittered = [&] {
      const double r = kViewJitterM * std::sqrt(unit(rng));
      const double a = 2.0 * std::numbers::pi * unit(rng);
      return offset_m(anchor, r * std::cos(a), r * std::sin(a));
    };
    char buf[32];
    std::vector<std::string> gallery_ids;
    for (std::size_t v = 0; v < cfg.views_per_place; ++v) {
      std::snprintf(buf, sizeof buf, "s%05zu_%02zu", p, v);
      GeoRecord r;
      r.id = buf;
      r.pos = jittered();
      r.domain = Domain::source;
      if (v == 0) r.split = train ? Split::train_query : Split::test_query;
      else r.split = train ? Split::train_gallery : Split::test_gallery;
      if (v != 0) gallery_ids.push_back(r.id);
      emit(std::move(r), render_view(w, p, cfg, rng));
      ++summary.source_records;
    }
    for (std::size_t v = 0; v < cfg.target_views_per_place; ++v) {
      std::snprintf(buf, sizeof buf, "t%05zu_%02zu", p, v);
      GeoRecord r;
      r.id = buf;
      r.domain = Domain::target;
      const LatLon pos = jittered();
      Tensor fm = render_view(w, p, cfg, rng);
      if (unit(rng) < outlier_prob) {
        std::normal_distribution<double> nd(0.0, 1.0);
        for (auto& x : fm.vec()) x = nd(rng);
        ++summary.outliers;
      } else {
        apply_style(w, fm, target_extra_noise, rng);
      }
      if (train) {
        r.split = Split::train_gallery;
      } else {
        r.split = Split::test_query;
        r.pos = pos;
        json j;
        j["query_id"] = r.id;
        j["relevant_ids"] = gallery_ids;
        pairs << j.dump() << '\n';
      }
      emit(std::move(r), fm);
      ++summary.target_records;
    }
  }
  write_manifest(out_dir / "manifest.jsonl", records);
  return summary;
}

}  // namespace vprda::geo
