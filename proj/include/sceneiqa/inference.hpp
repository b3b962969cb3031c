#pragma once

// Prediction with test-time augmentation and equal-weight ensembling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sceneiqa/core.hpp"
#include "sceneiqa/error.hpp"
#include "sceneiqa/image.hpp"
#include "sceneiqa/models.hpp"

namespace sceneiqa::inference {

enum class TTAMode { none, five_crop, ten_crop, random_crops, corners_center, dense_patches };

struct TTASpec {
  TTAMode mode = TTAMode::none;
  int count = 1;        // k for random crops, n for dense patches
  int crop_size = 224;  // spatial sources only
  double jitter = 0.05; // feature-vector sources: sd of the view perturbation
  std::uint64_t seed = 0;

  void validate() const {
    if ((mode == TTAMode::random_crops || mode == TTAMode::dense_patches) && count < 1) {
      throw ValidationError("TTA view count must be >= 1");
    }
    if (crop_size < 1) throw ValidationError("TTA crop size must be >= 1");
    if (jitter < 0.0) throw ValidationError("TTA jitter must be >= 0");
  }

  int view_count() const {
    switch (mode) {
      case TTAMode::none: return 1;
      case TTAMode::five_crop: return 5;
      case TTAMode::ten_crop: return 10;
      case TTAMode::random_crops: return count;
      case TTAMode::corners_center: return 9;
      case TTAMode::dense_patches: return count;
    }
    return 1;
  }
};

// none | five | ten | rand:k | corners | dense:n
inline TTASpec parse_tta(const std::string& text) {
  TTASpec spec;
  const auto colon = text.find(':');
  const std::string name = text.substr(0, colon);
  const auto parse_count = [&]() {
    if (colon == std::string::npos) throw ValidationError("TTA mode '" + name + "' needs a count, e.g. " + name + ":18");
    const auto v = sceneiqa::detail::parse_double(std::string_view(text).substr(colon + 1));
    if (!v || *v < 1 || *v != std::floor(*v)) throw ValidationError("bad TTA count in '" + text + "'");
    return static_cast<int>(*v);
  };
  if (name == "none") {
    spec.mode = TTAMode::none;
  } else if (name == "five") {
    spec.mode = TTAMode::five_crop;
  } else if (name == "ten") {
    spec.mode = TTAMode::ten_crop;
  } else if (name == "corners") {
    spec.mode = TTAMode::corners_center;
  } else if (name == "rand") {
    spec.mode = TTAMode::random_crops;
    spec.count = parse_count();
  } else if (name == "dense") {
    spec.mode = TTAMode::dense_patches;
    spec.count = parse_count();
  } else {
    throw ValidationError("unknown TTA mode '" + text + "'");
  }
  if (colon != std::string::npos && name != "rand" && name != "dense") throw ValidationError("TTA mode '" + name + "' takes no count");
  return spec;
}

inline std::string to_string(const TTASpec& spec) {
  switch (spec.mode) {
    case TTAMode::none: return "none";
    case TTAMode::five_crop: return "five";
    case TTAMode::ten_crop: return "ten";
    case TTAMode::random_crops: return "rand:" + std::to_string(spec.count);
    case TTAMode::corners_center: return "corners";
    case TTAMode::dense_patches: return "dense:" + std::to_string(spec.count);
  }
  return "none";
}

struct CropWindow {
  int top = 0;
  int left = 0;
  bool flipped = false;

  friend bool operator==(const CropWindow&, const CropWindow&) = default;
};

// `count` evenly spaced origins in [0, span]; the last one is flush with the edge.
inline std::vector<int> grid_origins(int span, int count) {
  std::vector<int> out;
  for (int i = 0; i < count; ++i) {
    out.push_back(count == 1 ? span / 2 : static_cast<int>(std::lround(static_cast<double>(span) * i / (count - 1))));
  }
  return out;
}

inline std::vector<CropWindow> crop_windows(int height, int width, const TTASpec& spec) {
  spec.validate();
  const int size = spec.crop_size;
  if (spec.mode == TTAMode::none) return {CropWindow{}};
  if (height < size || width < size) throw ValidationError("TTA: source smaller than the crop size");
  const int bottom = height - size, right = width - size;
  const int cy = bottom / 2, cx = right / 2;
  std::vector<CropWindow> windows;
  switch (spec.mode) {
    case TTAMode::none: break;
    case TTAMode::five_crop:
    case TTAMode::ten_crop:
      windows = {{0, 0}, {0, right}, {bottom, 0}, {bottom, right}, {cy, cx}};
      if (spec.mode == TTAMode::ten_crop) {
        for (int i = 0; i < 5; ++i) windows.push_back({windows[static_cast<std::size_t>(i)].top, windows[static_cast<std::size_t>(i)].left, true});
      }
      break;
    case TTAMode::corners_center:
      // four corners, top, bottom, left, right, center
      windows = {{0, 0}, {0, right}, {bottom, 0}, {bottom, right}, {0, cx}, {bottom, cx}, {cy, 0}, {cy, right}, {cy, cx}};
      break;
    case TTAMode::random_crops: {
      std::mt19937_64 rng(spec.seed);
      std::uniform_int_distribution<int> top(0, bottom), left(0, right);
      for (int i = 0; i < spec.count; ++i) {
        const int t = top(rng);
        windows.push_back({t, left(rng)});
      }
      break;
    }
    case TTAMode::dense_patches: {
      const int rows = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(spec.count))));
      const int cols = (spec.count + rows - 1) / rows;
      const auto ys = grid_origins(bottom, rows);
      const auto xs = grid_origins(right, cols);
      for (int r = 0; r < rows && static_cast<int>(windows.size()) < spec.count; ++r)
        for (int c = 0; c < cols && static_cast<int>(windows.size()) < spec.count; ++c) windows.push_back({ys[r], xs[c]});
      break;
    }
  }
  return windows;
}

// Spatial views of an image; `none` returns the image itself.
inline std::vector<Image> tta_views(const Image& source, const TTASpec& spec) {
  if (spec.mode == TTAMode::none) return {source};
  std::vector<Image> views;
  for (const auto& w : crop_windows(source.height, source.width, spec)) {
    Image v = crop(source, w.top, w.left, spec.crop_size, spec.crop_size);
    views.push_back(w.flipped ? hflip(v) : std::move(v));
  }
  return views;
}

namespace detail {

// FNV-1a; keeps per-image view seeds independent of manifest order.
inline std::uint64_t hash_key(const std::string& key, std::uint64_t seed) {
  std::uint64_t h = 1469598103934665603ULL ^ seed;
  for (unsigned char c : key) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace detail

// Feature vectors have no spatial extent; every mode other than `none`
// produces view_count() seeded jitter views of the vector.
inline std::vector<std::vector<double>> tta_views(const std::vector<double>& features, const TTASpec& spec,
                                                  const std::string& key = "") {
  spec.validate();
  if (spec.mode == TTAMode::none) return {features};
  std::mt19937_64 rng(detail::hash_key(key, spec.seed));
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<std::vector<double>> views;
  for (int v = 0; v < spec.view_count(); ++v) {
    auto view = features;
    if (spec.jitter > 0.0) {
      for (auto& x : view) x += spec.jitter * noise(rng);
    }
    views.push_back(std::move(view));
  }
  return views;
}

struct PredictionSet {
  std::map<std::string, double> scores;
  std::string model_id;
  TTASpec tta;
};

// Per image, the arithmetic mean of the model's scores over its TTA views.
inline PredictionSet predict(const models::Model& model, const Manifest& manifest, const FeatureStore& features,
                             const TTASpec& spec) {
  spec.validate();
  if (static_cast<int>(features.dim()) != model.config().input_dim) {
    throw ValidationError("feature dimension " + std::to_string(features.dim()) + " does not match the checkpoint (" +
                          std::to_string(model.config().input_dim) + ")");
  }
  PredictionSet out;
  out.model_id = models::to_string(model.config().kind);
  out.tta = spec;
  for (const auto& record : manifest.records()) {
    const auto views = tta_views(features_for(features, record), spec, record.image_id);
    models::Matrix inputs(static_cast<Eigen::Index>(features.dim()), static_cast<Eigen::Index>(views.size()));
    for (std::size_t v = 0; v < views.size(); ++v) {
      inputs.col(static_cast<Eigen::Index>(v)) = Eigen::Map<const Eigen::VectorXd>(views[v].data(), static_cast<Eigen::Index>(views[v].size()));
    }
    const auto scores = model.predict(inputs);
    double sum = 0.0;
    for (double s : scores) sum += s;
    out.scores[record.image_id] = sum / static_cast<double>(scores.size());
  }
  return out;
}

inline PredictionSet ensemble_mean(const std::vector<PredictionSet>& sets) {
  if (sets.empty()) throw ValidationError("ensemble_mean: no prediction sets");
  PredictionSet out;
  out.model_id = "ensemble";
  out.tta = sets.front().tta;
  for (const auto& [id, score] : sets.front().scores) {
    double sum = 0.0;
    for (const auto& s : sets) {
      auto it = s.scores.find(id);
      if (it == s.scores.end()) throw ValidationError("ensemble_mean: coverage mismatch at image " + id);
      sum += it->second;
    }
    out.scores[id] = sum / static_cast<double>(sets.size());
  }
  for (const auto& s : sets) {
    if (s.scores.size() != out.scores.size()) throw ValidationError("ensemble_mean: prediction sets cover different images");
  }
  return out;
}

// `image_id,score` with 6-decimal scores, in manifest order.
inline void write_predictions(std::ostream& out, const PredictionSet& set, const Manifest& manifest) {
  out << "image_id,score\n";
  for (const auto& r : manifest.records()) {
    auto it = set.scores.find(r.image_id);
    if (it == set.scores.end()) throw ValidationError("no prediction for image " + r.image_id);
    out << r.image_id << ',' << sceneiqa::detail::format_fixed(it->second) << '\n';
  }
}

inline void save_predictions(const std::string& path, const PredictionSet& set, const Manifest& manifest) {
  std::ostringstream buffer;
  write_predictions(buffer, set, manifest);
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << buffer.str();
}

inline std::map<std::string, double> parse_predictions(std::istream& in, const std::string& origin = "<stream>") {
  std::string line;
  if (!std::getline(in, line) || sceneiqa::detail::trim_eol(line) != "image_id,score") {
    throw ParseError(origin + ": expected header 'image_id,score'");
  }
  std::map<std::string, double> scores;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const auto row = sceneiqa::detail::trim_eol(line);
    if (row.empty()) continue;
    const auto fields = sceneiqa::detail::split_csv_line(row);
    const std::string where = origin + ":" + std::to_string(line_no);
    if (fields.size() != 2) throw ParseError(where + ": expected 2 fields");
    const auto v = sceneiqa::detail::parse_double(fields[1]);
    if (!v) throw ParseError(where + ": bad score '" + std::string(fields[1]) + "'");
    if (!scores.emplace(std::string(fields[0]), *v).second) throw ParseError(where + ": duplicate image_id " + std::string(fields[0]));
  }
  return scores;
}

inline std::map<std::string, double> load_predictions(const std::string& path) {
  auto in = sceneiqa::detail::open_input(path);
  return parse_predictions(in, path);
}

}  // namespace sceneiqa::inference
