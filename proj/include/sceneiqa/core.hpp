#pragma once

// Data model: per-image JOD records grouped by scene, manifest CSV I/O,
// scene-disjoint splitting and the synthetic scene generator.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sceneiqa/error.hpp"

namespace sceneiqa {

struct ImageRecord {
  std::string image_id;
  std::string scene_id;
  std::string source;  // image path or feature-store key
  double jod_overall = 0.0;
  std::optional<double> jod_detail;
  std::optional<double> jod_exposure;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return fields;
}

inline std::string_view trim_eol(std::string_view line) {
  while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.remove_suffix(1);
  return line;
}

inline std::optional<double> parse_double(std::string_view text) {
  double value = 0.0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || first == last) return std::nullopt;
  return value;
}

// Shortest representation that parses back to the same double.
inline std::string format_double(double value) {
  char buffer[64];
  auto [ptr, ec] = std::to_chars(buffer, buffer + sizeof(buffer), value);
  return std::string(buffer, ptr);
}

inline std::string format_fixed(double value, int decimals = 6) {
  char buffer[64];
  std::snprintf(buffer, sizeof(buffer), "%.*f", decimals, value);
  return buffer;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  return in;
}

}  // namespace detail

// Scene-grouped image records. Scores within a scene share one JOD scale and
// are never compared across scenes.
class Manifest {
 public:
  Manifest() = default;

  // Validates: unique image ids, finite JOD values, every scene has >= 2 records.
  explicit Manifest(std::vector<ImageRecord> records, bool wide_header = false)
      : records_(std::move(records)), wide_header_(wide_header) {
    std::unordered_set<std::string> seen;
    for (std::size_t i = 0; i < records_.size(); ++i) {
      const auto& r = records_[i];
      if (r.image_id.empty()) throw ValidationError("empty image_id in record " + std::to_string(i));
      if (r.scene_id.empty()) throw ValidationError("empty scene_id for image " + r.image_id);
      if (!seen.insert(r.image_id).second) throw ValidationError("duplicate image_id: " + r.image_id);
      const bool finite = std::isfinite(r.jod_overall) && (!r.jod_detail || std::isfinite(*r.jod_detail)) &&
                          (!r.jod_exposure || std::isfinite(*r.jod_exposure));
      if (!finite) throw ValidationError("non-finite JOD for image " + r.image_id);
      scenes_[r.scene_id].push_back(i);
    }
    for (const auto& [scene, members] : scenes_) {
      if (members.size() < 2) {
        throw ValidationError("scene " + scene + " has " + std::to_string(members.size()) +
                              " record(s); at least 2 are required");
      }
    }
  }

  const std::vector<ImageRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  std::size_t scene_count() const { return scenes_.size(); }

  // Sorted scene ids.
  std::vector<std::string> scene_ids() const {
    std::vector<std::string> ids;
    ids.reserve(scenes_.size());
    for (const auto& [scene, members] : scenes_) ids.push_back(scene);
    return ids;
  }

  // Record indices of one scene, in manifest order.
  const std::vector<std::size_t>& scene_members(const std::string& scene_id) const {
    auto it = scenes_.find(scene_id);
    if (it == scenes_.end()) throw ValidationError("unknown scene: " + scene_id);
    return it->second;
  }

  bool has_scene(const std::string& scene_id) const { return scenes_.count(scene_id) > 0; }

  // Sub-manifest restricted to the given scenes, manifest order preserved.
  Manifest subset(const std::set<std::string>& scene_ids) const {
    std::vector<ImageRecord> kept;
    for (const auto& r : records_) {
      if (scene_ids.count(r.scene_id)) kept.push_back(r);
    }
    return Manifest(std::move(kept), wide_header_);
  }

  bool has_detail_columns() const {
    return wide_header_ || std::any_of(records_.begin(), records_.end(),
                       [](const ImageRecord& r) { return r.jod_detail || r.jod_exposure; });
  }

 private:
  std::vector<ImageRecord> records_;
  std::map<std::string, std::vector<std::size_t>> scenes_;
  bool wide_header_ = false;
};

inline constexpr std::string_view kManifestHeader = "image_id,scene_id,source,jod_overall";
inline constexpr std::string_view kManifestHeaderFull = "image_id,scene_id,source,jod_overall,jod_detail,jod_exposure";

inline Manifest parse_manifest(std::istream& in, const std::string& origin = "<stream>") {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(origin + ": empty manifest");
  const std::string_view header = detail::trim_eol(line);
  bool full = false;
  if (header == kManifestHeaderFull) {
    full = true;
  } else if (header != kManifestHeader) {
    throw ParseError(origin + ": unexpected manifest header '" + std::string(header) + "'");
  }
  const std::size_t expected = full ? 6 : 4;

  std::vector<ImageRecord> records;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view row = detail::trim_eol(line);
    if (row.empty()) continue;
    const auto fields = detail::split_csv_line(row);
    const std::string where = origin + ":" + std::to_string(line_no);
    if (fields.size() != expected) {
      throw ParseError(where + ": expected " + std::to_string(expected) + " fields, got " +
                       std::to_string(fields.size()));
    }
    ImageRecord r;
    r.image_id = std::string(fields[0]);
    r.scene_id = std::string(fields[1]);
    r.source = std::string(fields[2]);
    const auto overall = detail::parse_double(fields[3]);
    if (!overall) throw ParseError(where + ": bad jod_overall '" + std::string(fields[3]) + "'");
    r.jod_overall = *overall;
    if (full) {
      for (int k = 0; k < 2; ++k) {
        const auto text = fields[4 + k];
        if (text.empty()) continue;
        const auto value = detail::parse_double(text);
        if (!value) throw ParseError(where + ": bad optional JOD '" + std::string(text) + "'");
        (k == 0 ? r.jod_detail : r.jod_exposure) = *value;
      }
    }
    records.push_back(std::move(r));
  }
  return Manifest(std::move(records), full);
}

inline Manifest load_manifest(const std::string& path) {
  auto in = detail::open_input(path);
  return parse_manifest(in, path);
}

inline void write_manifest(std::ostream& out, const Manifest& manifest) {
  const bool full = manifest.has_detail_columns();
  out << (full ? kManifestHeaderFull : kManifestHeader) << '\n';
  for (const auto& r : manifest.records()) {
    out << r.image_id << ',' << r.scene_id << ',' << r.source << ',' << detail::format_double(r.jod_overall);
    if (full) {
      out << ',' << (r.jod_detail ? detail::format_double(*r.jod_detail) : "");
      out << ',' << (r.jod_exposure ? detail::format_double(*r.jod_exposure) : "");
    }
    out << '\n';
  }
}

inline void save_manifest(const std::string& path, const Manifest& manifest) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  write_manifest(out, manifest);
}

// Feature vectors keyed by image id; read-only once built.
class FeatureStore {
 public:
  FeatureStore() = default;
  explicit FeatureStore(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return rows_.size(); }

  void insert(const std::string& key, std::vector<double> values) {
    if (values.size() != dim_) {
      throw ValidationError("feature row for " + key + " has " + std::to_string(values.size()) +
                            " values, expected " + std::to_string(dim_));
    }
    if (!rows_.emplace(key, std::move(values)).second) throw ValidationError("duplicate feature key: " + key);
  }

  bool contains(const std::string& key) const { return rows_.count(key) > 0; }

  const std::vector<double>& at(const std::string& key) const {
    auto it = rows_.find(key);
    if (it == rows_.end()) throw ValidationError("missing features for " + key);
    return it->second;
  }

  const std::map<std::string, std::vector<double>>& rows() const { return rows_; }

  friend bool operator==(const FeatureStore&, const FeatureStore&) = default;

 private:
  std::size_t dim_ = 0;
  std::map<std::string, std::vector<double>> rows_;
};

// Features are looked up by the record's source key, falling back to its image id.
inline const std::vector<double>& features_for(const FeatureStore& store, const ImageRecord& record) {
  if (store.contains(record.source)) return store.at(record.source);
  return store.at(record.image_id);
}

inline void write_features(std::ostream& out, const FeatureStore& store) {
  out << "image_id";
  for (std::size_t k = 0; k < store.dim(); ++k) out << ",f" << k;
  out << '\n';
  for (const auto& [key, values] : store.rows()) {
    out << key;
    for (double v : values) out << ',' << detail::format_double(v);
    out << '\n';
  }
}

inline void save_features(const std::string& path, const FeatureStore& store) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  write_features(out, store);
}

inline FeatureStore parse_features(std::istream& in, const std::string& origin = "<stream>") {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(origin + ": empty feature file");
  const auto header = detail::split_csv_line(detail::trim_eol(line));
  if (header.size() < 2 || header[0] != "image_id") throw ParseError(origin + ": bad feature header");
  FeatureStore store(header.size() - 1);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const auto row = detail::trim_eol(line);
    if (row.empty()) continue;
    const auto fields = detail::split_csv_line(row);
    const std::string where = origin + ":" + std::to_string(line_no);
    if (fields.size() != header.size()) throw ParseError(where + ": wrong field count");
    std::vector<double> values;
    values.reserve(fields.size() - 1);
    for (std::size_t k = 1; k < fields.size(); ++k) {
      const auto v = detail::parse_double(fields[k]);
      if (!v || !std::isfinite(*v)) throw ParseError(where + ": bad feature value '" + std::string(fields[k]) + "'");
      values.push_back(*v);
    }
    store.insert(std::string(fields[0]), std::move(values));
  }
  return store;
}

inline FeatureStore load_features(const std::string& path) {
  auto in = detail::open_input(path);
  return parse_features(in, path);
}

struct SplitSpec {
  std::set<std::string> train_scenes;
  std::set<std::string> test_scenes;
  std::uint64_t seed = 0;

  friend bool operator==(const SplitSpec&, const SplitSpec&) = default;
};

// Partitions whole scenes; the test side gets round(fraction * n) scenes,
// clamped so that both sides are non-empty.
inline SplitSpec scene_split(const Manifest& manifest, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ValidationError("test_fraction must lie in (0, 1)");
  auto scenes = manifest.scene_ids();
  if (scenes.size() < 2) throw ValidationError("scene_split needs at least 2 scenes");
  std::mt19937_64 rng(seed);
  std::shuffle(scenes.begin(), scenes.end(), rng);
  const auto n = static_cast<long>(scenes.size());
  const long n_test = std::clamp(std::lround(test_fraction * static_cast<double>(n)), 1L, n - 1);
  SplitSpec split;
  split.seed = seed;
  for (long i = 0; i < n; ++i) {
    (i < n_test ? split.test_scenes : split.train_scenes).insert(scenes[static_cast<std::size_t>(i)]);
  }
  return split;
}

struct SyntheticConfig {
  int n_scenes = 8;
  int images_per_scene = 40;
  int feature_dim = 16;
  double scale_min = 0.5;
  double scale_max = 3.0;
  double shift_min = -2.0;
  double shift_max = 2.0;
  double noise_sd = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_scenes < 1) throw ValidationError("n_scenes must be >= 1");
    if (images_per_scene < 2) throw ValidationError("images_per_scene must be >= 2");
    if (feature_dim < 1) throw ValidationError("feature_dim must be >= 1");
    if (!(scale_min > 0.0) || scale_max < scale_min) throw ValidationError("scene scale range must satisfy 0 < min <= max");
    if (shift_max < shift_min) throw ValidationError("scene shift range must satisfy min <= max");
    if (!(noise_sd >= 0.0)) throw ValidationError("noise_sd must be >= 0");
  }
};

struct SyntheticScene {
  std::string scene_id;
  double scale = 1.0;
  double shift = 0.0;
};

struct SyntheticData {
  Manifest manifest;
  FeatureStore features;
  std::map<std::string, double> latent;  // image_id -> latent quality u
  std::vector<SyntheticScene> scenes;
  // feature_dim x (1 + n_scenes) projection of [u, one-hot(scene)].
  std::vector<std::vector<double>> projection;
};

// Each scene draws latent qualities u_i ~ N(0, 1) and maps them to JOD through
// its own affine scale a_s * u + b_s. Features are a fixed random projection of
// [u, one-hot(scene)] plus Gaussian noise.
inline SyntheticData generate_synthetic(const SyntheticConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> scale_dist(config.scale_min, config.scale_max);
  std::uniform_real_distribution<double> shift_dist(config.shift_min, config.shift_max);

  const auto n_scenes = static_cast<std::size_t>(config.n_scenes);
  const auto dim = static_cast<std::size_t>(config.feature_dim);
  const double norm = 1.0 / std::sqrt(static_cast<double>(dim));

  SyntheticData data;
  data.projection.assign(dim, std::vector<double>(1 + n_scenes));
  for (auto& row : data.projection) {
    for (auto& v : row) v = normal(rng) * norm;
  }

  std::vector<ImageRecord> records;
  data.features = FeatureStore(dim);
  char name[64];
  for (std::size_t s = 0; s < n_scenes; ++s) {
    SyntheticScene scene;
    std::snprintf(name, sizeof(name), "scene_%03zu", s);
    scene.scene_id = name;
    scene.scale = scale_dist(rng);
    scene.shift = shift_dist(rng);
    for (int i = 0; i < config.images_per_scene; ++i) {
      const double u = normal(rng);
      std::snprintf(name, sizeof(name), "%s_img_%03d", scene.scene_id.c_str(), i);
      ImageRecord r;
      r.image_id = name;
      r.scene_id = scene.scene_id;
      r.source = r.image_id;
      r.jod_overall = scene.scale * u + scene.shift;
      std::vector<double> x(dim);
      for (std::size_t k = 0; k < dim; ++k) {
        x[k] = data.projection[k][0] * u + data.projection[k][1 + s];
        if (config.noise_sd > 0.0) x[k] += config.noise_sd * normal(rng);
      }
      data.latent[r.image_id] = u;
      data.features.insert(r.image_id, std::move(x));
      records.push_back(std::move(r));
    }
    data.scenes.push_back(scene);
  }
  data.manifest = Manifest(std::move(records));
  return data;
}

}  // namespace sceneiqa
