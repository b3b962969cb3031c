#pragma once

// Challenge evaluation protocol: SRCC / PLCC / KRCC computed within each scene,
// then aggregated across scenes by median.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sceneiqa/core.hpp"
#include "sceneiqa/error.hpp"
#include "sceneiqa/stats.hpp"

namespace sceneiqa::metrics {

namespace detail {

inline void check_pair(std::span<const double> x, std::span<const double> y, const char* what) {
  if (x.size() != y.size()) throw ValidationError(std::string(what) + ": length mismatch");
  if (x.size() < 2) throw ValidationError(std::string(what) + ": need at least 2 samples");
}

inline bool is_constant(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [&](double e) { return e == v.front(); });
}

// Centered Pearson correlation; callers guarantee non-constant inputs.
inline double pearson_centered(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::nan("");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// Number of tied pairs summed over groups of equal consecutive values.
template <typename Eq>
std::int64_t tied_pairs(std::size_t n, Eq&& equal) {
  std::int64_t ties = 0;
  std::size_t run = 1;
  for (std::size_t i = 1; i <= n; ++i) {
    if (i < n && equal(i - 1, i)) {
      ++run;
    } else {
      ties += static_cast<std::int64_t>(run) * static_cast<std::int64_t>(run - 1) / 2;
      run = 1;
    }
  }
  return ties;
}

// Merge sort counting inversions.
inline std::int64_t count_swaps(std::vector<double>& v, std::vector<double>& buffer, std::size_t lo, std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::int64_t swaps = count_swaps(v, buffer, lo, mid) + count_swaps(v, buffer, mid, hi);
  std::size_t i = lo, j = mid, k = lo;
  while (i < mid && j < hi) {
    if (v[j] < v[i]) {
      swaps += static_cast<std::int64_t>(mid - i);
      buffer[k++] = v[j++];
    } else {
      buffer[k++] = v[i++];
    }
  }
  while (i < mid) buffer[k++] = v[i++];
  while (j < hi) buffer[k++] = v[j++];
  std::copy(buffer.begin() + static_cast<std::ptrdiff_t>(lo), buffer.begin() + static_cast<std::ptrdiff_t>(hi),
            v.begin() + static_cast<std::ptrdiff_t>(lo));
  return swaps;
}

}  // namespace detail

// Fractional (tie-averaged) ranks starting at 1.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i + 1;
    while (j < order.size() && v[order[j]] == v[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of positions i+1 .. j
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = rank;
    i = j;
  }
  return ranks;
}

// Spearman rank correlation; nullopt when either side is constant.
inline std::optional<double> srcc(std::span<const double> x, std::span<const double> y) {
  detail::check_pair(x, y, "srcc");
  if (detail::is_constant(x) || detail::is_constant(y)) return std::nullopt;
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return detail::pearson_centered(rx, ry);
}

// Pearson linear correlation; nullopt on zero variance.
inline std::optional<double> plcc(std::span<const double> x, std::span<const double> y) {
  detail::check_pair(x, y, "plcc");
  if (detail::is_constant(x) || detail::is_constant(y)) return std::nullopt;
  const double r = detail::pearson_centered(x, y);
  if (std::isnan(r)) return std::nullopt;
  return r;
}

// Kendall tau-b (Knight's O(n log n) algorithm); nullopt when either side is constant.
inline std::optional<double> krcc(std::span<const double> x, std::span<const double> y) {
  detail::check_pair(x, y, "krcc");
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return x[a] < x[b] || (x[a] == x[b] && y[a] < y[b]);
  });
  const std::int64_t ties_x =
      detail::tied_pairs(n, [&](std::size_t a, std::size_t b) { return x[order[a]] == x[order[b]]; });
  const std::int64_t ties_xy = detail::tied_pairs(
      n, [&](std::size_t a, std::size_t b) { return x[order[a]] == x[order[b]] && y[order[a]] == y[order[b]]; });

  std::vector<double> ys(n);
  for (std::size_t i = 0; i < n; ++i) ys[i] = y[order[i]];
  std::vector<double> buffer(n);
  const std::int64_t swaps = detail::count_swaps(ys, buffer, 0, n);
  const std::int64_t ties_y = detail::tied_pairs(n, [&](std::size_t a, std::size_t b) { return ys[a] == ys[b]; });

  const auto total = static_cast<std::int64_t>(n) * static_cast<std::int64_t>(n - 1) / 2;
  const std::int64_t untied_x = total - ties_x;
  const std::int64_t untied_y = total - ties_y;
  if (untied_x == 0 || untied_y == 0) return std::nullopt;
  const std::int64_t numerator = total - ties_x - ties_y + ties_xy - 2 * swaps;
  return static_cast<double>(numerator) / std::sqrt(static_cast<double>(untied_x * untied_y));
}

struct SceneMetrics {
  std::string scene_id;
  std::optional<double> srcc;
  std::optional<double> plcc;
  std::optional<double> krcc;
  std::size_t n = 0;

  bool defined() const { return srcc && plcc && krcc; }
  double average() const { return (*srcc + *plcc + *krcc) / 3.0; }
};

struct MetricReport {
  std::vector<SceneMetrics> per_scene;
  double median_srcc = 0.0;
  double median_plcc = 0.0;
  double median_krcc = 0.0;
  // Median over scenes of the scene-wise average of the three correlations.
  double final_metric = 0.0;
  std::vector<std::string> excluded_scenes;
};

inline SceneMetrics scene_metrics(const std::string& scene_id, std::span<const double> pred, std::span<const double> gt) {
  SceneMetrics m;
  m.scene_id = scene_id;
  m.n = pred.size();
  m.srcc = srcc(pred, gt);
  m.plcc = plcc(pred, gt);
  m.krcc = krcc(pred, gt);
  return m;
}

// Both aggregation modes from per-scene metrics. Scenes with an undefined
// correlation are excluded from every median and listed.
inline MetricReport aggregate(std::vector<SceneMetrics> per_scene) {
  MetricReport report;
  std::vector<double> s, p, k, avg;
  for (const auto& m : per_scene) {
    if (!m.defined()) {
      report.excluded_scenes.push_back(m.scene_id);
      continue;
    }
    s.push_back(*m.srcc);
    p.push_back(*m.plcc);
    k.push_back(*m.krcc);
    avg.push_back(m.average());
  }
  if (avg.empty()) throw ValidationError("no scene has defined correlation metrics");
  report.median_srcc = stats::median(s);
  report.median_plcc = stats::median(p);
  report.median_krcc = stats::median(k);
  report.final_metric = stats::median(avg);
  report.per_scene = std::move(per_scene);
  return report;
}

// Scores every scene of the manifest against its jod_overall values.
inline MetricReport evaluate(const std::map<std::string, double>& predictions, const Manifest& manifest) {
  std::vector<SceneMetrics> per_scene;
  for (const auto& scene : manifest.scene_ids()) {
    std::vector<double> pred, gt;
    for (std::size_t idx : manifest.scene_members(scene)) {
      const auto& r = manifest.records()[idx];
      auto it = predictions.find(r.image_id);
      if (it == predictions.end()) throw ValidationError("missing prediction for image " + r.image_id);
      if (!std::isfinite(it->second)) throw ValidationError("non-finite prediction for image " + r.image_id);
      pred.push_back(it->second);
      gt.push_back(r.jod_overall);
    }
    per_scene.push_back(scene_metrics(scene, pred, gt));
  }
  return aggregate(std::move(per_scene));
}

struct LeaderboardEntry {
  std::size_t rank = 0;
  std::string name;
  MetricReport report;
};

// Descending final metric; equal finals fall back to name order.
inline std::vector<LeaderboardEntry> leaderboard(std::vector<std::pair<std::string, MetricReport>> reports) {
  std::stable_sort(reports.begin(), reports.end(), [](const auto& a, const auto& b) {
    if (a.second.final_metric != b.second.final_metric) return a.second.final_metric > b.second.final_metric;
    return a.first < b.first;
  });
  std::vector<LeaderboardEntry> out;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    out.push_back({i + 1, std::move(reports[i].first), std::move(reports[i].second)});
  }
  return out;
}

inline void print_leaderboard(std::ostream& out, const std::vector<LeaderboardEntry>& entries) {
  std::size_t width = 4;
  for (const auto& e : entries) width = std::max(width, e.name.size());
  char line[512];
  std::snprintf(line, sizeof(line), "%-4s  %-*s  %12s  %11s  %11s  %11s\n", "rank", static_cast<int>(width), "name",
                "final_metric", "median_srcc", "median_plcc", "median_krcc");
  out << line;
  for (const auto& e : entries) {
    std::snprintf(line, sizeof(line), "%-4zu  %-*s  %12.6f  %11.6f  %11.6f  %11.6f\n", e.rank, static_cast<int>(width),
                  e.name.c_str(), e.report.final_metric, e.report.median_srcc, e.report.median_plcc,
                  e.report.median_krcc);
    out << line;
  }
}

// Report JSON with reals fixed at 6 decimals; undefined correlations are null.
inline void write_report(std::ostream& out, const MetricReport& report) {
  using sceneiqa::detail::format_fixed;
  const auto opt = [](const std::optional<double>& v) { return v ? format_fixed(*v) : std::string("null"); };
  out << "{\n  \"per_scene\": [";
  for (std::size_t i = 0; i < report.per_scene.size(); ++i) {
    const auto& m = report.per_scene[i];
    out << (i ? ",\n" : "\n") << "    {\"scene_id\": " << nlohmann::json(m.scene_id).dump() << ", \"srcc\": " << opt(m.srcc)
        << ", \"plcc\": " << opt(m.plcc) << ", \"krcc\": " << opt(m.krcc) << ", \"n\": " << m.n << "}";
  }
  out << (report.per_scene.empty() ? "],\n" : "\n  ],\n");
  out << "  \"median_srcc\": " << format_fixed(report.median_srcc) << ",\n";
  out << "  \"median_plcc\": " << format_fixed(report.median_plcc) << ",\n";
  out << "  \"median_krcc\": " << format_fixed(report.median_krcc) << ",\n";
  out << "  \"final_metric\": " << format_fixed(report.final_metric) << ",\n";
  out << "  \"excluded_scenes\": " << nlohmann::json(report.excluded_scenes).dump() << "\n}\n";
}

inline void save_report(const std::string& path, const MetricReport& report) {
  std::ostringstream buffer;
  write_report(buffer, report);
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << buffer.str();
}

inline MetricReport parse_report(std::istream& in, const std::string& origin = "<stream>") {
  nlohmann::json j;
  try {
    in >> j;
    MetricReport report;
    const auto opt = [](const nlohmann::json& v) -> std::optional<double> {
      if (v.is_null()) return std::nullopt;
      return v.get<double>();
    };
    for (const auto& s : j.at("per_scene")) {
      SceneMetrics m;
      m.scene_id = s.at("scene_id").get<std::string>();
      m.srcc = opt(s.at("srcc"));
      m.plcc = opt(s.at("plcc"));
      m.krcc = opt(s.at("krcc"));
      m.n = s.at("n").get<std::size_t>();
      report.per_scene.push_back(std::move(m));
    }
    report.median_srcc = j.at("median_srcc").get<double>();
    report.median_plcc = j.at("median_plcc").get<double>();
    report.median_krcc = j.at("median_krcc").get<double>();
    report.final_metric = j.at("final_metric").get<double>();
    report.excluded_scenes = j.at("excluded_scenes").get<std::vector<std::string>>();
    return report;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(origin + ": " + e.what());
  }
}

inline MetricReport load_report(const std::string& path) {
  auto in = sceneiqa::detail::open_input(path);
  return parse_report(in, path);
}

}  // namespace sceneiqa::metrics
