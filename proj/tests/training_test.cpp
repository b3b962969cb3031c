#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "sceneiqa/metrics.hpp"
#include "sceneiqa/training.hpp"

using namespace sceneiqa;
using namespace sceneiqa::training;

namespace {

SyntheticData toy(int scenes, int per_scene, std::uint64_t seed = 0, double noise = 0.0) {
  return generate_synthetic({.n_scenes = scenes, .images_per_scene = per_scene, .noise_sd = noise, .seed = seed});
}

// Settings that train the toy models in seconds.
TrainConfig fast_config(LossKind loss, int epochs, models::ModelKind kind = models::ModelKind::hyper) {
  TrainConfig c;
  c.loss = loss;
  c.model.kind = kind;
  c.epochs = epochs;
  c.schedule.kind = ScheduleKind::cosine;
  c.schedule.max_lr = 1e-2;
  c.schedule.cycle_epochs = epochs;
  c.seed = 3;
  return c;
}

double median_scene_srcc(const models::Model& model, const Manifest& manifest, const FeatureStore& features) {
  std::map<std::string, double> pred;
  for (const auto& r : manifest.records()) {
    const auto& f = features_for(features, r);
    pred[r.image_id] = model.predict(Eigen::Map<const models::Matrix>(f.data(), static_cast<Eigen::Index>(f.size()), 1))[0];
  }
  return metrics::evaluate(pred, manifest).median_srcc;
}

void expect_well_formed(const std::vector<Batch>& batches, const Manifest& m, const BatchSpec& spec) {
  for (const auto& batch : batches) {
    ASSERT_EQ(batch.size(), static_cast<std::size_t>(spec.scenes));
    std::set<std::string> ids;
    for (const auto& slot : batch) {
      ids.insert(slot.scene_id);
      ASSERT_EQ(slot.records.size(), static_cast<std::size_t>(spec.samples_per_scene));
      for (auto idx : slot.records) EXPECT_EQ(m.records()[idx].scene_id, slot.scene_id);
    }
    EXPECT_EQ(ids.size(), batch.size());
  }
}

}  // namespace

TEST(Batches, FourScenesOfThirtyTwo) {
  const auto data = toy(4, 32);
  const BatchSpec spec{4, 32};
  const auto batches = scene_balanced_batches(data.manifest, spec, 0);
  ASSERT_EQ(batches.size(), 1u);
  std::set<std::size_t> seen;
  for (const auto& slot : batches[0]) seen.insert(slot.records.begin(), slot.records.end());
  EXPECT_EQ(seen.size(), 128u);
  EXPECT_EQ(spec.batch_size(), 128);
  expect_well_formed(batches, data.manifest, spec);
}

TEST(Batches, EpochVisitsEveryScene) {
  const auto data = toy(8, 12);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const BatchSpec spec{4, 8};
    const auto batches = scene_balanced_batches(data.manifest, spec, seed);
    std::set<std::string> scenes;
    std::set<std::size_t> records;
    for (const auto& b : batches) {
      for (const auto& slot : b) {
        scenes.insert(slot.scene_id);
        records.insert(slot.records.begin(), slot.records.end());
      }
    }
    EXPECT_EQ(scenes.size(), 8u);
    EXPECT_EQ(records.size(), data.manifest.size());
    expect_well_formed(batches, data.manifest, spec);
  }
}

TEST(Batches, CompositionOnUnevenScenes) {
  std::vector<ImageRecord> recs;
  const int sizes[] = {2, 3, 7, 11, 20};
  for (int s = 0; s < 5; ++s) {
    for (int i = 0; i < sizes[s]; ++i) {
      const std::string id = "s" + std::to_string(s) + "_" + std::to_string(i);
      recs.push_back({id, "s" + std::to_string(s), id, static_cast<double>(i), {}, {}});
    }
  }
  const Manifest m(recs);
  for (int S = 1; S <= 5; ++S) {
    for (int K : {2, 4, 9}) {
      const BatchSpec spec{S, K};
      expect_well_formed(scene_balanced_batches(m, spec, static_cast<std::uint64_t>(S * 10 + K)), m, spec);
    }
  }
}

TEST(Batches, DeterministicAndErrors) {
  const auto data = toy(6, 10);
  const BatchSpec spec{3, 4};
  const auto a = scene_balanced_batches(data.manifest, spec, 7);
  const auto b = scene_balanced_batches(data.manifest, spec, 7);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[i].size(); ++j) {
      EXPECT_EQ(a[i][j].scene_id, b[i][j].scene_id);
      EXPECT_EQ(a[i][j].records, b[i][j].records);
    }
  }
  EXPECT_THROW(scene_balanced_batches(data.manifest, {7, 4}, 0), ValidationError);
  EXPECT_THROW(scene_balanced_batches(data.manifest, {0, 4}, 0), ValidationError);
  EXPECT_THROW(scene_balanced_batches(data.manifest, {2, 1}, 0), ValidationError);
}

TEST(Pairs, CountsAndDistinctness) {
  std::mt19937_64 rng(1);
  const std::vector<std::size_t> two{4, 9};
  const auto p2 = sample_pairs(two, rng);
  ASSERT_EQ(p2.size(), 1u);
  EXPECT_EQ(std::min(p2[0].first, p2[0].second), 0u);
  EXPECT_EQ(std::max(p2[0].first, p2[0].second), 1u);

  const std::vector<std::size_t> five{10, 11, 12, 13, 14};
  const auto p5 = sample_pairs(five, rng);
  EXPECT_EQ(p5.size(), 10u);
  std::set<std::pair<std::size_t, std::size_t>> unordered;
  for (auto [x, y] : p5) {
    EXPECT_NE(x, y);
    unordered.insert(std::minmax(x, y));
  }
  EXPECT_EQ(unordered.size(), 10u);
  EXPECT_EQ(sample_pairs(five, rng, 3).size(), 3u);

  // repeated records (sampling with replacement) are never paired with themselves
  const std::vector<std::size_t> repeated{1, 1, 2};
  for (auto [x, y] : sample_pairs(repeated, rng)) EXPECT_NE(repeated[x], repeated[y]);

  const std::vector<std::size_t> one{3};
  EXPECT_THROW(sample_pairs(one, rng), ValidationError);
}

TEST(Patches, BoundsFlipsAndErrors) {
  std::mt19937_64 rng(2);
  Image big(300, 400);
  for (int y = 0; y < big.height; ++y)
    for (int x = 0; x < big.width; ++x) big.at(y, x) = static_cast<float>(y * 1000 + x);

  const auto patches = sample_patches(big, 25, 224, 0.5, rng, 1.5);
  ASSERT_EQ(patches.size(), 25u);
  for (const auto& p : patches) {
    EXPECT_GE(p.top, 0);
    EXPECT_GE(p.left, 0);
    EXPECT_LE(p.top + p.size, big.height);
    EXPECT_LE(p.left + p.size, big.width);
    EXPECT_EQ(p.score, 1.5);
    const Image img = extract_patch(big, p);
    EXPECT_EQ(img.height, 224);
    const float corner = p.flipped ? img.at(0, 223) : img.at(0, 0);
    EXPECT_EQ(corner, static_cast<float>(p.top * 1000 + p.left));
  }

  for (const auto& p : sample_patches(big, 50, 32, 0.0, rng)) EXPECT_FALSE(p.flipped);

  Image exact(64, 64);
  exact.at(3, 5) = 1.0f;
  const auto same = sample_patches(exact, 10, 64, 0.0, rng);
  for (const auto& p : same) EXPECT_EQ(extract_patch(exact, p), exact);

  EXPECT_THROW(sample_patches(exact, 1, 65, 0.5, rng), ValidationError);
  EXPECT_THROW(sample_patches(exact, 0, 8, 0.5, rng), ValidationError);
}

TEST(Schedule, StepDecayExample) {
  ScheduleSpec s;
  for (int e = 0; e < 5; ++e) EXPECT_DOUBLE_EQ(lr_at(s, e), 2e-5);
  for (int e = 5; e < 10; ++e) EXPECT_DOUBLE_EQ(lr_at(s, e), 2e-6);
  EXPECT_DOUBLE_EQ(lr_at(s, 10), 2e-7);
  for (int e = 1; e < 60; ++e) EXPECT_LE(lr_at(s, e), lr_at(s, e - 1));
  EXPECT_THROW(lr_at(s, -1), ValidationError);
}

TEST(Schedule, CosineEndpointsAndBounds) {
  ScheduleSpec s;
  s.kind = ScheduleKind::cosine;
  s.max_lr = 1e-4;
  s.min_lr = 1e-6;
  s.cycle_epochs = 20;
  s.warmup_epochs = 3;
  EXPECT_EQ(lr_at(s, s.warmup_epochs), s.max_lr);
  EXPECT_EQ(lr_at(s, s.warmup_epochs + s.cycle_epochs), s.min_lr);
  EXPECT_EQ(lr_at(s, 500), s.min_lr);
  for (int e = 0; e < 40; ++e) {
    EXPECT_LE(lr_at(s, e), s.max_lr);
    EXPECT_GE(lr_at(s, e), s.min_lr);
  }
  for (int e = 1; e <= s.warmup_epochs; ++e) EXPECT_GT(lr_at(s, e), lr_at(s, e - 1));
  for (int e = s.warmup_epochs + 1; e < 40; ++e) EXPECT_LE(lr_at(s, e), lr_at(s, e - 1));

  s.min_lr = 0.0;
  s.warmup_epochs = 0;
  EXPECT_EQ(lr_at(s, 0), s.max_lr);
  EXPECT_EQ(lr_at(s, s.cycle_epochs), 0.0);
  EXPECT_NEAR(lr_at(s, s.cycle_epochs / 2), 0.5 * s.max_lr, 1e-18);

  s.decay_factor = 1.0;  // irrelevant for cosine
  EXPECT_NO_THROW(s.validate());
  ScheduleSpec bad;
  bad.decay_factor = 1.0;
  EXPECT_THROW(bad.validate(), ValidationError);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  models::ParamStore p;
  p.add("a", "g", models::Matrix::Constant(2, 1, 1.0));
  TrainConfig c;
  c.weight_decay = 0.0;
  Adam opt(p, c);
  models::Matrix g(2, 1);
  g << 3.0, -0.5;
  opt.step(p, {g}, 0.1);
  // bias-corrected first step is lr * sign(g) up to epsilon
  EXPECT_NEAR(p.get("a")(0), 0.9, 1e-8);
  EXPECT_NEAR(p.get("a")(1), 1.1, 1e-8);
}

TEST(Adam, FreshGroupsGetMultiplierOnlyWithPretrainedGroups) {
  const auto run = [](const std::set<std::string>& pretrained) {
    models::ParamStore p;
    p.add("old", "backbone", models::Matrix::Zero(1, 1));
    p.add("new", "head", models::Matrix::Zero(1, 1));
    TrainConfig c;
    c.weight_decay = 0.0;
    c.pretrained_groups = pretrained;
    Adam opt(p, c);
    opt.step(p, {models::Matrix::Ones(1, 1), models::Matrix::Ones(1, 1)}, 0.01);
    return std::pair{p.get("old")(0), p.get("new")(0)};
  };
  const auto [old0, new0] = run({});
  EXPECT_NEAR(old0, -0.01, 1e-8);
  EXPECT_NEAR(new0, -0.01, 1e-8);
  const auto [old1, new1] = run({"backbone"});
  EXPECT_NEAR(old1, -0.01, 1e-8);
  EXPECT_NEAR(new1, -0.1, 1e-7);
}

TEST(Adam, DecoupledWeightDecayShrinksWithoutGradient) {
  models::ParamStore p;
  p.add("a", "g", models::Matrix::Constant(1, 1, 2.0));
  TrainConfig c;
  c.weight_decay = 0.1;
  c.decoupled_weight_decay = true;
  Adam opt(p, c);
  opt.step(p, {models::Matrix::Zero(1, 1)}, 0.5);
  EXPECT_DOUBLE_EQ(p.get("a")(0), 2.0 * (1.0 - 0.05));
}

TEST(Train, DeterministicGivenSeed) {
  const auto data = toy(4, 20, 1, 0.1);
  auto c = fast_config(LossKind::fidelity, 5, models::ModelKind::fhiqa);
  c.batch = {4, 8};
  const auto a = train(c, data.manifest, data.features);
  const auto b = train(c, data.manifest, data.features);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].loss, b.history[i].loss);
    EXPECT_EQ(a.history[i].lr, b.history[i].lr);
  }
  const auto& pa = a.model.params().entries();
  const auto& pb = b.model.params().entries();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].value, pb[i].value) << pa[i].name;
  c.seed = 4;
  EXPECT_NE(train(c, data.manifest, data.features).history.back().loss, a.history.back().loss);
}

TEST(Train, CheckpointIsLowestLossEpoch) {
  const auto data = toy(4, 16, 2, 0.3);
  auto c = fast_config(LossKind::huber, 12);
  c.batch = {4, 8};
  c.schedule.max_lr = 0.05;
  const auto r = train(c, data.manifest, data.features);
  double lowest = r.history.front().loss;
  int flagged = 0;
  for (const auto& h : r.history) {
    lowest = std::min(lowest, h.loss);
    flagged += h.checkpoint;
  }
  EXPECT_EQ(r.best_loss, lowest);
  EXPECT_EQ(flagged, 1);
  EXPECT_TRUE(r.history[static_cast<std::size_t>(r.best_epoch)].checkpoint);
  EXPECT_EQ(r.history[static_cast<std::size_t>(r.best_epoch)].loss, lowest);
}

TEST(Train, LossDecreasesForEveryLoss) {
  const auto data = toy(4, 40, 5);
  for (auto loss : {LossKind::ssi, LossKind::merged, LossKind::fidelity, LossKind::patch, LossKind::huber}) {
    auto c = fast_config(loss, 51);
    c.schedule.cycle_epochs = 100;
    const auto r = train(c, data.manifest, data.features);
    EXPECT_LT(r.history[50].loss, r.history[0].loss) << to_string(loss);
  }
}

TEST(Train, SsiReachesHighSrccOnNoiselessData) {
  const auto data = toy(4, 40, 6);
  const auto r = train(fast_config(LossKind::ssi, 200), data.manifest, data.features);
  const auto scenes = data.manifest.scene_ids();
  std::map<std::string, double> pred;
  for (const auto& rec : data.manifest.records()) {
    const auto& f = features_for(data.features, rec);
    pred[rec.image_id] = r.model.predict(Eigen::Map<const models::Matrix>(f.data(), static_cast<Eigen::Index>(f.size()), 1))[0];
  }
  for (const auto& m : metrics::evaluate(pred, data.manifest).per_scene) EXPECT_GE(*m.srcc, 0.99) << m.scene_id;
}

TEST(Train, FidelityReachesMedianSrcc) {
  const auto data = toy(4, 40, 6);
  const auto r = train(fast_config(LossKind::fidelity, 200), data.manifest, data.features);
  EXPECT_GE(median_scene_srcc(r.model, data.manifest, data.features), 0.9);
}

TEST(Train, SceneHeadModelsTrain) {
  const auto data = toy(4, 24, 7);
  for (auto kind : {models::ModelKind::sem, models::ModelKind::monet, models::ModelKind::gated}) {
    auto c = fast_config(LossKind::ssi, 30, kind);
    c.batch = {4, 8};
    const auto r = train(c, data.manifest, data.features);
    EXPECT_LT(r.best_loss, r.history.front().loss) << models::to_string(kind);
    EXPECT_GE(median_scene_srcc(r.model, data.manifest, data.features), 0.8) << models::to_string(kind);
  }
}

TEST(Train, DivergenceAndConfigErrors) {
  auto data = toy(4, 8);
  FeatureStore poisoned(data.features.dim());
  for (const auto& [key, row] : data.features.rows()) {
    auto v = row;
    v[0] = std::numeric_limits<double>::quiet_NaN();
    poisoned.insert(key, v);
  }
  auto c = fast_config(LossKind::ssi, 2);
  c.batch = {4, 4};
  EXPECT_THROW(train(c, data.manifest, poisoned), DivergenceError);

  auto odd = c;
  odd.loss = LossKind::merged;
  odd.batch = {4, 3};
  EXPECT_THROW(train(odd, data.manifest, data.features), ValidationError);
  auto few = c;
  few.batch = {5, 4};
  EXPECT_THROW(train(few, data.manifest, data.features), ValidationError);
  auto zero = c;
  zero.epochs = 0;
  EXPECT_THROW(train(zero, data.manifest, data.features), ValidationError);
  EXPECT_EQ(parse_loss_kind("fidelity"), LossKind::fidelity);
  EXPECT_THROW(parse_loss_kind("l2"), ValidationError);
}

TEST(Train, InitCopiesMatchingParameters) {
  const auto data = toy(4, 8);
  auto c = fast_config(LossKind::ssi, 1);
  c.batch = {4, 4};
  c.schedule.max_lr = 1e-12;
  c.weight_decay = 0.0;
  models::ModelConfig mc = c.model;
  mc.scenes = data.manifest.scene_ids();
  mc.input_dim = static_cast<int>(data.features.dim());
  mc.seed = 99;
  const models::Model donor(mc);
  const auto r = train(c, data.manifest, data.features, &donor.params());
  const auto& a = r.model.params().get("backbone.hidden.w");
  const auto& b = donor.params().get("backbone.hidden.w");
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(History, CsvFormat) {
  std::ostringstream out;
  write_history(out, {{0, 0.5, 2e-5, false}, {1, 0.25, 2e-5, true}});
  EXPECT_EQ(out.str(), "epoch,loss,lr,checkpoint_flag\n0,0.5,2e-05,0\n1,0.25,2e-05,1\n");
}
