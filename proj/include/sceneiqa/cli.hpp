#pragma once

// Batch command-line surface: synth | train | predict | eval | leaderboard.
// Exit codes: 0 success, 1 runtime failure, 2 usage error or missing input.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sceneiqa/checkpoint.hpp"
#include "sceneiqa/core.hpp"
#include "sceneiqa/inference.hpp"
#include "sceneiqa/metrics.hpp"
#include "sceneiqa/models.hpp"
#include "sceneiqa/training.hpp"

namespace sceneiqa::cli {

namespace fs = std::filesystem;

// Raised for problems the user can fix on the command line (exit code 2).
class UsageError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void require_file(const std::string& path, const char* flag) {
  if (!fs::is_regular_file(path)) throw UsageError(std::string(flag) + ": no such file: " + path);
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error("cannot create directory " + dir);
}

inline SplitSpec load_split(const std::string& path) {
  try {
    std::ifstream in(path);
    nlohmann::json j;
    in >> j;
    SplitSpec split;
    split.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& s : j.at("train_scenes")) split.train_scenes.insert(s.get<std::string>());
    for (const auto& s : j.at("test_scenes")) split.test_scenes.insert(s.get<std::string>());
    return split;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
}

inline std::string split_json(const SplitSpec& split) {
  const nlohmann::json j = {{"seed", split.seed},
                            {"train_scenes", std::vector<std::string>(split.train_scenes.begin(), split.train_scenes.end())},
                            {"test_scenes", std::vector<std::string>(split.test_scenes.begin(), split.test_scenes.end())}};
  return j.dump(2) + "\n";
}

inline Manifest select_subset(const Manifest& manifest, const std::string& split_path, const std::string& subset) {
  if (subset == "all") return manifest;
  if (split_path.empty()) throw UsageError("--subset " + subset + " requires --split");
  const auto split = load_split(split_path);
  return manifest.subset(subset == "train" ? split.train_scenes : split.test_scenes);
}

inline std::string stem(const std::string& path) { return fs::path(path).stem().string(); }

}  // namespace detail

struct SynthOptions {
  SyntheticConfig config;
  std::string out;
};

struct TrainOptions {
  std::string manifest, features, model = "hyper", loss = "ssi", schedule = "step", init, out;
  int batch_scenes = 4, batch_per_scene = 32, epochs = 100, decay_every = 5, warmup = 0, cycle = 30, patches = 25;
  std::optional<double> lr;
  double decay_factor = 10.0, min_lr = 0.0, weight_decay = 5e-4, scene_loss_weight = 1.0, test_fraction = 0.0,
         huber_delta = losses::kDefaultHuberDelta;
  bool adamw = false;
  std::uint64_t seed = 0;
};

struct PredictOptions {
  std::vector<std::string> checkpoints;
  std::string manifest, features, tta = "none", split, subset = "all", out;
  double jitter = 0.05;
  int crop_size = 224;
  std::uint64_t seed = 0;
};

struct EvalOptions {
  std::string pred, manifest, split, subset = "all", out;
};

inline int run_synth(const SynthOptions& o, std::ostream& out) {
  const auto data = generate_synthetic(o.config);
  detail::ensure_dir(o.out);
  const fs::path dir(o.out);
  save_manifest((dir / "manifest.csv").string(), data.manifest);
  save_features((dir / "features.csv").string(), data.features);
  out << "wrote " << data.manifest.size() << " records in " << data.manifest.scene_count() << " scenes to " << o.out << '\n';
  return 0;
}

inline int run_train(const TrainOptions& o, std::ostream& out) {
  detail::require_file(o.manifest, "--manifest");
  detail::require_file(o.features, "--features");
  if (!o.init.empty()) detail::require_file(o.init, "--init");

  training::TrainConfig config;
  config.model.kind = models::parse_model_kind(o.model);
  config.loss = training::parse_loss_kind(o.loss);
  config.model.seed = o.seed;
  config.batch = {o.batch_scenes, o.batch_per_scene};
  if (o.schedule == "step") {
    config.schedule.kind = training::ScheduleKind::step;
    config.schedule.base_lr = o.lr.value_or(2e-5);
    config.schedule.decay_factor = o.decay_factor;
    config.schedule.decay_every = o.decay_every;
  } else {
    config.schedule.kind = training::ScheduleKind::cosine;
    config.schedule.max_lr = o.lr.value_or(1e-4);
    config.schedule.min_lr = o.min_lr;
    config.schedule.cycle_epochs = o.cycle;
    config.schedule.warmup_epochs = o.warmup;
  }
  config.epochs = o.epochs;
  config.seed = o.seed;
  config.weight_decay = o.weight_decay;
  config.decoupled_weight_decay = o.adamw;
  config.scene_loss_weight = o.scene_loss_weight;
  config.huber_delta = o.huber_delta;
  config.patches_per_image = o.patches;

  Manifest manifest = load_manifest(o.manifest);
  const FeatureStore features = load_features(o.features);
  std::optional<SplitSpec> split;
  if (o.test_fraction > 0.0) {
    split = scene_split(manifest, o.test_fraction, o.seed);
    manifest = manifest.subset(split->train_scenes);
  }
  std::optional<checkpoint::Checkpoint> init;
  if (!o.init.empty()) {
    init = checkpoint::load(o.init);
    // Groups whose every array is taken from the initial checkpoint count as pretrained.
    auto probe = config.model;
    probe.scenes = manifest.scene_ids();
    probe.input_dim = static_cast<int>(features.dim());
    std::map<std::string, bool> complete;
    for (const auto& e : models::layout::build(probe).entries()) {
      const auto& src = init->model.params();
      const bool hit = src.contains(e.name) && src.get(e.name).rows() == e.value.rows() && src.get(e.name).cols() == e.value.cols();
      auto [it, inserted] = complete.emplace(e.group, hit);
      if (!inserted) it->second = it->second && hit;
    }
    for (const auto& [group, ok] : complete) {
      if (ok) config.pretrained_groups.insert(group);
    }
  }

  const auto result = training::train(config, manifest, features, init ? &init->model.params() : nullptr);

  detail::ensure_dir(o.out);
  const fs::path dir(o.out);
  checkpoint::Checkpoint ckpt{result.model,
                              {{"loss", training::to_string(config.loss)},
                               {"best_epoch", result.best_epoch},
                               {"best_loss", result.best_loss},
                               {"epochs", config.epochs},
                               {"seed", config.seed}}};
  checkpoint::save((dir / "checkpoint.json").string(), ckpt);
  training::save_history((dir / "history.csv").string(), result.history);
  if (split) detail::write_text(dir / "split.json", detail::split_json(*split));
  out << "trained " << o.model << " with " << o.loss << " loss; best epoch " << result.best_epoch << " (loss "
      << result.best_loss << ")\n";
  return 0;
}

inline int run_predict(const PredictOptions& o, std::ostream& out) {
  for (const auto& c : o.checkpoints) detail::require_file(c, "--checkpoint");
  detail::require_file(o.manifest, "--manifest");
  detail::require_file(o.features, "--features");
  if (!o.split.empty()) detail::require_file(o.split, "--split");

  auto spec = inference::parse_tta(o.tta);
  spec.seed = o.seed;
  spec.jitter = o.jitter;
  spec.crop_size = o.crop_size;
  const Manifest manifest = detail::select_subset(load_manifest(o.manifest), o.split, o.subset);
  const FeatureStore features = load_features(o.features);
  std::vector<inference::PredictionSet> sets;
  for (const auto& path : o.checkpoints) {
    const auto ckpt = checkpoint::load(path);
    sets.push_back(inference::predict(ckpt.model, manifest, features, spec));
  }
  const auto result = sets.size() == 1 ? sets.front() : inference::ensemble_mean(sets);
  inference::save_predictions(o.out, result, manifest);
  out << "wrote " << result.scores.size() << " predictions to " << o.out << '\n';
  return 0;
}

inline int run_eval(const EvalOptions& o, std::ostream& out) {
  detail::require_file(o.pred, "--pred");
  detail::require_file(o.manifest, "--manifest");
  if (!o.split.empty()) detail::require_file(o.split, "--split");
  const Manifest manifest = detail::select_subset(load_manifest(o.manifest), o.split, o.subset);
  const auto predictions = inference::load_predictions(o.pred);
  const auto report = metrics::evaluate(predictions, manifest);
  metrics::save_report(o.out, report);
  out << "final_metric " << sceneiqa::detail::format_fixed(report.final_metric) << " median_srcc "
      << sceneiqa::detail::format_fixed(report.median_srcc) << '\n';
  return 0;
}

inline int run_leaderboard(const std::vector<std::string>& reports, std::ostream& out) {
  for (const auto& r : reports) detail::require_file(r, "--reports");
  std::vector<std::pair<std::string, metrics::MetricReport>> entries;
  for (const auto& r : reports) entries.emplace_back(detail::stem(r), metrics::load_report(r));
  metrics::print_leaderboard(out, metrics::leaderboard(std::move(entries)));
  return 0;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Scene-wise portrait quality assessment toolkit", "sceneiqa"};
  app.require_subcommand(1);

  SynthOptions synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic scene-grouped dataset");
  synth_cmd->add_option("--scenes", synth.config.n_scenes, "Number of scenes")->capture_default_str();
  synth_cmd->add_option("--per-scene", synth.config.images_per_scene, "Images per scene")->capture_default_str();
  synth_cmd->add_option("--feature-dim", synth.config.feature_dim, "Feature vector length")->capture_default_str();
  synth_cmd->add_option("--noise-sd", synth.config.noise_sd, "Feature noise standard deviation")->capture_default_str();
  synth_cmd->add_option("--scale-min", synth.config.scale_min)->capture_default_str();
  synth_cmd->add_option("--scale-max", synth.config.scale_max)->capture_default_str();
  synth_cmd->add_option("--shift-min", synth.config.shift_min)->capture_default_str();
  synth_cmd->add_option("--shift-max", synth.config.shift_max)->capture_default_str();
  synth_cmd->add_option("--seed", synth.config.seed)->capture_default_str();
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();

  TrainOptions train;
  auto* train_cmd = app.add_subcommand("train", "Train a model on a manifest and feature store");
  train_cmd->add_option("--manifest", train.manifest)->required();
  train_cmd->add_option("--features", train.features)->required();
  train_cmd->add_option("--model", train.model)->check(CLI::IsMember({"hyper", "sem", "fhiqa", "monet", "gated"}))->capture_default_str();
  train_cmd->add_option("--loss", train.loss)->check(CLI::IsMember({"ssi", "merged", "fidelity", "patch", "huber"}))->capture_default_str();
  train_cmd->add_option("--batch-scenes", train.batch_scenes, "Scenes per batch (S)")->capture_default_str();
  train_cmd->add_option("--batch-per-scene", train.batch_per_scene, "Samples per scene (K)")->capture_default_str();
  train_cmd->add_option("--schedule", train.schedule)->check(CLI::IsMember({"step", "cosine"}))->capture_default_str();
  train_cmd->add_option("--lr", train.lr, "Base (step) or maximum (cosine) learning rate");
  train_cmd->add_option("--decay-factor", train.decay_factor)->capture_default_str();
  train_cmd->add_option("--decay-every", train.decay_every)->capture_default_str();
  train_cmd->add_option("--min-lr", train.min_lr)->capture_default_str();
  train_cmd->add_option("--warmup", train.warmup, "Cosine warm-up epochs")->capture_default_str();
  train_cmd->add_option("--cycle", train.cycle, "Cosine cycle length in epochs")->capture_default_str();
  train_cmd->add_option("--epochs", train.epochs)->capture_default_str();
  train_cmd->add_option("--weight-decay", train.weight_decay)->capture_default_str();
  train_cmd->add_flag("--adamw", train.adamw, "Decoupled weight decay");
  train_cmd->add_option("--scene-loss-weight", train.scene_loss_weight)->capture_default_str();
  train_cmd->add_option("--huber-delta", train.huber_delta)->capture_default_str();
  train_cmd->add_option("--patches", train.patches, "Views per image for the patch loss")->capture_default_str();
  train_cmd->add_option("--test-fraction", train.test_fraction, "Hold out this fraction of scenes")->capture_default_str();
  train_cmd->add_option("--init", train.init, "Checkpoint to initialise matching parameters from");
  train_cmd->add_option("--seed", train.seed)->capture_default_str();
  train_cmd->add_option("--out", train.out, "Output directory")->required();

  PredictOptions predict;
  auto* predict_cmd = app.add_subcommand("predict", "Score a manifest with one or more checkpoints");
  predict_cmd->add_option("--checkpoint", predict.checkpoints, "Checkpoint(s); several are averaged")->required();
  predict_cmd->add_option("--manifest", predict.manifest)->required();
  predict_cmd->add_option("--features", predict.features)->required();
  predict_cmd->add_option("--tta", predict.tta, "none|five|ten|rand:k|corners|dense:n")->capture_default_str();
  predict_cmd->add_option("--tta-jitter", predict.jitter)->capture_default_str();
  predict_cmd->add_option("--crop-size", predict.crop_size)->capture_default_str();
  predict_cmd->add_option("--split", predict.split);
  predict_cmd->add_option("--subset", predict.subset)->check(CLI::IsMember({"all", "train", "test"}))->capture_default_str();
  predict_cmd->add_option("--seed", predict.seed)->capture_default_str();
  predict_cmd->add_option("--out", predict.out)->required();

  EvalOptions eval;
  auto* eval_cmd = app.add_subcommand("eval", "Scene-wise correlation report");
  eval_cmd->add_option("--pred", eval.pred)->required();
  eval_cmd->add_option("--manifest", eval.manifest)->required();
  eval_cmd->add_option("--split", eval.split);
  eval_cmd->add_option("--subset", eval.subset)->check(CLI::IsMember({"all", "train", "test"}))->capture_default_str();
  eval_cmd->add_option("--out", eval.out)->required();

  std::vector<std::string> reports;
  auto* board_cmd = app.add_subcommand("leaderboard", "Rank report files by final metric");
  board_cmd->add_option("--reports", reports)->required()->expected(1, -1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*synth_cmd) return run_synth(synth, out);
    if (*train_cmd) return run_train(train, out);
    if (*predict_cmd) return run_predict(predict, out);
    if (*eval_cmd) return run_eval(eval, out);
    if (*board_cmd) return run_leaderboard(reports, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace sceneiqa::cli
