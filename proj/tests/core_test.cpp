#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/Dense>

#include "sceneiqa/core.hpp"
#include "sceneiqa/metrics.hpp"

using namespace sceneiqa;

namespace {

Manifest parse(const std::string& text) {
  std::istringstream in(text);
  return parse_manifest(in);
}

std::string expect_error(const std::string& text) {
  try {
    parse(text);
  } catch (const Error& e) {
    return e.what();
  }
  ADD_FAILURE() << "expected an error for:\n" << text;
  return {};
}

}  // namespace

TEST(Manifest, LoadsTwoScenesOfThree) {
  const auto m = parse(
      "image_id,scene_id,source,jod_overall\n"
      "a1,A,a1.png,1.0\na2,A,a2.png,2.5\na3,A,a3.png,-0.5\n"
      "b1,B,b1.png,0\nb2,B,b2.png,3\nb3,B,b3.png,1e-2\n");
  EXPECT_EQ(m.size(), 6u);
  EXPECT_EQ(m.scene_count(), 2u);
  EXPECT_EQ(m.scene_ids(), (std::vector<std::string>{"A", "B"}));
  EXPECT_EQ(m.scene_members("B").size(), 3u);
  EXPECT_DOUBLE_EQ(m.records()[5].jod_overall, 0.01);
  EXPECT_FALSE(m.records()[0].jod_detail.has_value());
}

TEST(Manifest, DuplicateIdRejected) {
  const auto msg = expect_error("image_id,scene_id,source,jod_overall\nx,A,x,1\nx,A,y,2\ny,A,y,0\n");
  EXPECT_NE(msg.find("duplicate"), std::string::npos) << msg;
}

TEST(Manifest, SmallSceneRejectedByName) {
  const auto msg = expect_error("image_id,scene_id,source,jod_overall\na,A,a,1\nb,A,b,2\nc,lonely,c,0\n");
  EXPECT_NE(msg.find("lonely"), std::string::npos) << msg;
}

TEST(Manifest, MalformedRowsRejected) {
  expect_error("image_id,scene_id,source\na,A,a\n");
  expect_error("image_id,scene_id,source,jod_overall\na,A,a,abc\nb,A,b,1\n");
  expect_error("image_id,scene_id,source,jod_overall\na,A,a\nb,A,b,1\n");
  expect_error("image_id,scene_id,source,jod_overall\na,A,a,nan\nb,A,b,1\n");
  expect_error("");
}

TEST(Manifest, OptionalColumns) {
  const auto m = parse(
      "image_id,scene_id,source,jod_overall,jod_detail,jod_exposure\n"
      "a,S,a,1,0.5,\nb,S,b,2,,-1\n");
  ASSERT_TRUE(m.records()[0].jod_detail.has_value());
  EXPECT_DOUBLE_EQ(*m.records()[0].jod_detail, 0.5);
  EXPECT_FALSE(m.records()[0].jod_exposure.has_value());
  EXPECT_DOUBLE_EQ(*m.records()[1].jod_exposure, -1.0);
}

TEST(Manifest, RoundTripIsFieldForField) {
  for (const std::string& text : {
           std::string("image_id,scene_id,source,jod_overall\n"
                       "a,S,img/a.png,1.25\nb,S,img/b.png,-0.3333333333333333\nc,T,c,7\nd,T,d,1e-05\n"),
           std::string("image_id,scene_id,source,jod_overall,jod_detail,jod_exposure\n"
                       "a,S,a,1,0.5,\nb,S,b,2,,-1\n"),
       }) {
    const auto m = parse(text);
    std::ostringstream out;
    write_manifest(out, m);
    const auto again = parse(out.str());
    ASSERT_EQ(again.size(), m.size());
    for (std::size_t i = 0; i < m.size(); ++i) {
      const auto& x = m.records()[i];
      const auto& y = again.records()[i];
      EXPECT_EQ(x.image_id, y.image_id);
      EXPECT_EQ(x.scene_id, y.scene_id);
      EXPECT_EQ(x.source, y.source);
      EXPECT_EQ(x.jod_overall, y.jod_overall);
      EXPECT_EQ(x.jod_detail, y.jod_detail);
      EXPECT_EQ(x.jod_exposure, y.jod_exposure);
    }
    std::ostringstream twice;
    write_manifest(twice, again);
    EXPECT_EQ(out.str(), twice.str());
  }
}

TEST(Manifest, SubsetKeepsOrder) {
  const auto data = generate_synthetic({.n_scenes = 3, .images_per_scene = 4});
  const auto sub = data.manifest.subset({"scene_002", "scene_000"});
  EXPECT_EQ(sub.size(), 8u);
  EXPECT_EQ(sub.records().front().scene_id, "scene_000");
  EXPECT_EQ(sub.records().back().scene_id, "scene_002");
}

TEST(Features, RoundTripAndLookup) {
  FeatureStore store(3);
  store.insert("a", {1.0, -2.5, 0.1});
  store.insert("b", {0.0, 1e-300, 3.0});
  std::stringstream buf;
  write_features(buf, store);
  EXPECT_EQ(parse_features(buf), store);
  EXPECT_THROW(store.insert("c", {1.0}), ValidationError);
  EXPECT_THROW(store.at("zzz"), ValidationError);

  ImageRecord r{"b", "S", "a", 0.0, {}, {}};
  EXPECT_EQ(features_for(store, r)[0], 1.0);  // source key wins
  r.source = "missing";
  EXPECT_EQ(features_for(store, r)[2], 3.0);  // falls back to image id
}

TEST(Split, TenScenesFractionPointTwo) {
  const auto data = generate_synthetic({.n_scenes = 10, .images_per_scene = 3});
  const auto split = scene_split(data.manifest, 0.2, 0);
  EXPECT_EQ(split.test_scenes.size(), 2u);
  EXPECT_EQ(split.train_scenes.size(), 8u);
  EXPECT_EQ(split, scene_split(data.manifest, 0.2, 0));
}

TEST(Split, IsAPartition) {
  const auto data = generate_synthetic({.n_scenes = 13, .images_per_scene = 2});
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (double f : {0.01, 0.3, 0.5, 0.99}) {
      const auto split = scene_split(data.manifest, f, seed);
      EXPECT_FALSE(split.test_scenes.empty());
      EXPECT_FALSE(split.train_scenes.empty());
      for (const auto& s : data.manifest.scene_ids()) {
        EXPECT_NE(split.train_scenes.count(s), split.test_scenes.count(s)) << s;
      }
      EXPECT_EQ(split.train_scenes.size() + split.test_scenes.size(), 13u);
    }
  }
}

TEST(Split, Errors) {
  const auto one = generate_synthetic({.n_scenes = 1, .images_per_scene = 5});
  EXPECT_THROW(scene_split(one.manifest, 0.5, 0), ValidationError);
  const auto two = generate_synthetic({.n_scenes = 2, .images_per_scene = 5});
  EXPECT_THROW(scene_split(two.manifest, 0.0, 0), ValidationError);
  EXPECT_THROW(scene_split(two.manifest, 1.0, 0), ValidationError);
}

TEST(Synthetic, Counts) {
  const auto data = generate_synthetic({.n_scenes = 4, .images_per_scene = 10});
  EXPECT_EQ(data.manifest.size(), 40u);
  EXPECT_EQ(data.manifest.scene_count(), 4u);
  EXPECT_EQ(data.scenes.size(), 4u);
  std::set<double> scales;
  for (const auto& s : data.scenes) scales.insert(s.scale);
  EXPECT_EQ(scales.size(), 4u);
  EXPECT_EQ(data.features.size(), 40u);
  EXPECT_EQ(data.features.dim(), 16u);
}

TEST(Synthetic, SameSeedIsBitIdentical) {
  const SyntheticConfig c{.n_scenes = 3, .images_per_scene = 7, .feature_dim = 5, .noise_sd = 0.3, .seed = 42};
  const auto a = generate_synthetic(c);
  const auto b = generate_synthetic(c);
  std::ostringstream ma, mb;
  write_manifest(ma, a.manifest);
  write_manifest(mb, b.manifest);
  EXPECT_EQ(ma.str(), mb.str());
  EXPECT_EQ(a.features, b.features);
  auto other = c;
  other.seed = 43;
  std::ostringstream mc;
  write_manifest(mc, generate_synthetic(other).manifest);
  EXPECT_NE(ma.str(), mc.str());
}

TEST(Synthetic, ConfigValidation) {
  EXPECT_THROW(generate_synthetic({.images_per_scene = 1}), ValidationError);
  EXPECT_THROW(generate_synthetic({.scale_min = 0.0}), ValidationError);
  EXPECT_THROW(generate_synthetic({.noise_sd = -1.0}), ValidationError);
}

// Recovers u from the noiseless features by least squares on the known
// projection, then checks the within-scene order matches the JOD order.
TEST(Synthetic, NoiselessLatentOrderMatchesJod) {
  const SyntheticConfig c{.n_scenes = 4, .images_per_scene = 12, .feature_dim = 16, .seed = 9};
  const auto data = generate_synthetic(c);
  const auto rows = static_cast<Eigen::Index>(c.feature_dim);
  const auto cols = static_cast<Eigen::Index>(1 + c.n_scenes);
  Eigen::MatrixXd P(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) P(i, j) = data.projection[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  const auto qr = P.colPivHouseholderQr();
  for (const auto& scene : data.manifest.scene_ids()) {
    std::vector<double> recovered, jod, latent;
    for (auto idx : data.manifest.scene_members(scene)) {
      const auto& r = data.manifest.records()[idx];
      const auto& x = data.features.at(r.image_id);
      const Eigen::VectorXd coef = qr.solve(Eigen::Map<const Eigen::VectorXd>(x.data(), rows));
      recovered.push_back(coef(0));
      latent.push_back(data.latent.at(r.image_id));
      jod.push_back(r.jod_overall);
    }
    EXPECT_EQ(metrics::srcc(recovered, jod).value(), 1.0) << scene;
    EXPECT_EQ(metrics::srcc(latent, jod).value(), 1.0) << scene;
  }
}
