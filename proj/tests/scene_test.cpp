#include "grouptr/scene.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "grouptr/errors.hpp"

using namespace grouptr;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "grouptr_scene_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

Scene random_scene(std::uint64_t seed, std::size_t persons = 6, std::size_t frames = 8, std::size_t dim = 4) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Scene s;
  s.frame_count = frames;
  s.app_dim = dim;
  for (std::size_t i = 0; i < persons; ++i) {
    TrackedPerson p;
    p.id = static_cast<int>(10 + 3 * i);
    p.boxes.assign(frames, std::nullopt);
    p.appearance.assign(frames, {});
    for (std::size_t t = 0; t < frames; ++t) {
      if (t != 0 && u(rng) < 0.3) continue;
      const double x = 0.9 * u(rng), y = 0.8 * u(rng);
      p.boxes[t] = BoundingBox{x, y, x + 0.01 + 0.09 * u(rng), y + 0.02 + 0.18 * u(rng)};
      std::vector<float> f(dim);
      for (auto& v : f) v = static_cast<float>(u(rng) - 0.5);
      p.appearance[t] = f;
    }
    s.persons.push_back(std::move(p));
  }
  s.groups = {{10, 13}, {16, 19, 22}};
  return s;
}

Scene single_box_scene(std::size_t frames, BoundingBox box) {
  Scene s;
  s.frame_count = frames;
  s.app_dim = 1;
  TrackedPerson p;
  p.boxes.assign(frames, box);
  s.persons.push_back(std::move(p));
  return s;
}

}  // namespace

TEST(SceneFile, RoundTripIsIdentity) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Scene s = random_scene(seed);
    const auto sp = temp_path("rt.json"), fp = temp_path("rt.gtft");
    save_scene(s, sp);
    save_features(s, fp);
    Scene loaded = load_scene_with_features(sp, fp);
    EXPECT_EQ(loaded, s);
  }
}

TEST(SceneFile, SceneWithoutFeaturesRoundTrips) {
  Scene s = random_scene(3);
  for (auto& p : s.persons) p.appearance.clear();
  EXPECT_EQ(scene_from_json(scene_to_json(s)), s);
}

TEST(SceneFile, RejectsInvertedBox) {
  const std::string text =
      R"({"frame_count":2,"app_dim":1,"persons":[{"id":1,"frames":[{"t":0,"box":[0.3,0.1,0.2,0.5]}]}],"groups":[]})";
  try {
    scene_from_json(text);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("person 1"), std::string::npos) << e.what();
  }
}

TEST(SceneFile, RejectsOverlappingGroups) {
  Scene s = random_scene(1);
  s.groups = {{10, 13}, {13, 16}};
  try {
    scene_from_json(scene_to_json(s));
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("person 13"), std::string::npos) << e.what();
  }
}

TEST(SceneFile, RejectsUnknownGroupMemberAndSingletonGroup) {
  Scene s = random_scene(1);
  s.groups = {{10, 99}};
  EXPECT_THROW(s.validate(), ValidationError);
  s.groups = {{10}};
  EXPECT_THROW(s.validate(), ValidationError);
}

TEST(SceneFile, ParseErrorReportsLine) {
  const std::string text = "{\n\"frame_count\": 2,\n\"app_dim\": ,\n}";
  try {
    scene_from_json(text);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(SceneFile, MissingFileIsIoError) {
  EXPECT_THROW(load_scene("/nonexistent/scene.json"), IoError);
}

TEST(FeatureFile, LayoutIsLittleEndianGTFT) {
  Scene s = random_scene(0, 1, 2, 2);
  s.persons[0].boxes[1].reset();
  s.persons[0].appearance[1].clear();
  s.persons[0].appearance[0] = {1.0f, -2.0f};
  s.groups.clear();
  const auto fp = temp_path("layout.gtft");
  save_features(s, fp);
  std::ifstream in(fp, std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::vector<unsigned char> expect{'G', 'T', 'F', 'T', 1, 0, 0, 0, 1, 0, 0, 0,  // header
                                          10, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0,        // id, frames, dim
                                          0, 0, 0, 0,                                 // t
                                          0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0};
  EXPECT_EQ(bytes, expect);
}

TEST(FeatureFile, RejectsNonIncreasingFramesAndBadMagic) {
  Scene s = random_scene(2, 1, 3, 1);
  s.groups.clear();
  for (std::size_t t = 0; t < 3; ++t) {
    s.persons[0].boxes[t] = BoundingBox{0.1, 0.1, 0.2, 0.2};
    s.persons[0].appearance[t] = {0.5f};
  }
  const auto fp = temp_path("order.gtft");
  {
    std::ofstream out(fp, std::ios::binary);
    const unsigned char bytes[] = {'G', 'T', 'F', 'T', 1, 0, 0, 0, 1, 0, 0, 0, 10, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0,
                                   1,   0,   0,   0,   0, 0, 0, 0, 0, 0, 0, 0, 0,  0, 0, 0, 0, 0, 0, 0};
    out.write(reinterpret_cast<const char*>(bytes), sizeof bytes);
  }
  EXPECT_THROW(load_features(s, fp), ValidationError);
  {
    std::ofstream out(fp, std::ios::binary);
    out << "GTFX";
  }
  EXPECT_THROW(load_features(s, fp), ValidationError);
}

TEST(FeatureFile, AppearanceMustMatchVisibility) {
  Scene s = random_scene(4);
  const auto sp = temp_path("vis.json"), fp = temp_path("vis.gtft");
  save_features(s, fp);
  // Hide a frame that has a feature record.
  for (std::size_t t = 0; t < s.frame_count; ++t) {
    if (s.persons[0].boxes[t]) {
      s.persons[0].boxes[t].reset();
      if (s.persons[0].visible_count() == 0) s.persons[0].boxes[t] = BoundingBox{0.1, 0.1, 0.2, 0.2};
      else break;
    }
  }
  for (auto& p : s.persons) p.appearance.clear();
  save_scene(s, sp);
  EXPECT_THROW(load_scene_with_features(sp, fp), ValidationError);
}

TEST(TrajectoryFeatures, CenterAndSize) {
  TrackedPerson p;
  p.boxes = {BoundingBox{0.1, 0.1, 0.3, 0.5}, std::nullopt};
  auto f = build_trajectory_features(p, 0, 2);
  EXPECT_NEAR(f.at(0, 0), 0.2, 1e-15);
  EXPECT_NEAR(f.at(1, 0), 0.3, 1e-15);
  EXPECT_NEAR(f.at(2, 0), 0.2, 1e-15);
  EXPECT_NEAR(f.at(3, 0), 0.4, 1e-15);
  EXPECT_EQ(f.at(4, 0), 1.0);
  for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(f.at(c, 1), 0.0);
  EXPECT_TRUE(f.any_visible);
}

TEST(TrajectoryFeatures, FullyVisibleAndInvisibleWindows) {
  Scene s = random_scene(5);
  auto& p = s.persons[0];
  for (auto& b : p.boxes) b = BoundingBox{0.2, 0.2, 0.3, 0.4};
  auto f = build_trajectory_features(p, 2, 4);
  for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(f.at(4, t), 1.0);
  TrackedPerson hidden;
  hidden.boxes = {BoundingBox{0.1, 0.1, 0.2, 0.2}, std::nullopt, std::nullopt};
  EXPECT_FALSE(build_trajectory_features(hidden, 1, 2).any_visible);
  EXPECT_THROW(build_trajectory_features(hidden, 2, 2), std::out_of_range);
}

TEST(TrajectoryFeatures, ValuesStayInUnitRange) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Scene s = random_scene(seed);
    for (const auto& p : s.persons) {
      auto f = build_trajectory_features(p, 0, s.frame_count);
      for (double v : f.values) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
    }
  }
}

TEST(PerturbBoxes, ZeroSigmaIsIdentity) {
  Scene s = random_scene(6);
  EXPECT_EQ(perturb_boxes(s, 0.0, 123), s);
}

TEST(PerturbBoxes, SameSeedSameOutput) {
  Scene s = random_scene(7);
  EXPECT_EQ(perturb_boxes(s, 0.2, 9), perturb_boxes(s, 0.2, 9));
  EXPECT_NE(perturb_boxes(s, 0.2, 9), perturb_boxes(s, 0.2, 10));
}

TEST(PerturbBoxes, CornerNoiseVarianceScalesWithBoxSize) {
  // w = h = 0.2, sigma = 0.1: corner disturbances ~ N(0, 0.02^2).
  constexpr std::size_t kDraws = 100000;
  const BoundingBox box{0.4, 0.4, 0.6, 0.6};
  Scene noisy = perturb_boxes(single_box_scene(kDraws, box), 0.1, 2024);
  double sx = 0.0, sxx = 0.0, sy = 0.0, syy = 0.0;
  for (const auto& b : noisy.persons[0].boxes) {
    const double dx = b->x0 - box.x0, dy = b->y1 - box.y1;
    sx += dx;
    sxx += dx * dx;
    sy += dy;
    syy += dy * dy;
  }
  const double n = static_cast<double>(kDraws);
  const double var_x = sxx / n - (sx / n) * (sx / n);
  const double var_y = syy / n - (sy / n) * (sy / n);
  EXPECT_NEAR(var_x, 0.0004, 0.05 * 0.0004);
  EXPECT_NEAR(var_y, 0.0004, 0.05 * 0.0004);
}

TEST(PerturbBoxes, NeverEmitsInvalidBoxes) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Scene s = random_scene(seed);
    for (double sigma : {0.3, 2.0, 50.0}) {
      Scene noisy = perturb_boxes(s, sigma, seed);
      EXPECT_NO_THROW(noisy.validate(true));
    }
  }
  // Boxes hugging the border.
  Scene edge = single_box_scene(1000, BoundingBox{0.0, 0.0, 1e-3, 1.0});
  EXPECT_NO_THROW(perturb_boxes(edge, 5.0, 1).validate());
}

TEST(DropDetections, ZeroRateIsIdentity) {
  Scene s = random_scene(8);
  EXPECT_EQ(drop_detections(s, 0.0, 5), s);
}

TEST(DropDetections, EmpiricalRateMatches) {
  constexpr std::size_t kFrames = 100000;
  Scene s = single_box_scene(kFrames, BoundingBox{0.1, 0.1, 0.2, 0.2});
  Scene d = drop_detections(s, 0.1, 77);
  const double removed = 1.0 - static_cast<double>(d.persons[0].visible_count()) / kFrames;
  EXPECT_NEAR(removed, 0.1, 0.01);
}

TEST(DropDetections, DegenerateRateEmptiesSceneSafely) {
  Scene s;
  s.frame_count = 1;
  s.app_dim = 2;
  for (int i = 0; i < 50; ++i) {
    TrackedPerson p;
    p.id = i;
    p.boxes = {BoundingBox{0.1, 0.1, 0.2, 0.2}};
    p.appearance = {{0.f, 1.f}};
    s.persons.push_back(p);
  }
  s.groups = {{0, 1}, {2, 3, 4}};
  Scene d = drop_detections(s, 0.999, 3);
  EXPECT_LT(d.persons.size(), 5u);
  for (const auto& g : d.groups) EXPECT_GE(g.size(), 2u);
  if (!d.persons.empty()) EXPECT_NO_THROW(d.validate(true));
  EXPECT_THROW(drop_detections(s, 1.0, 3), std::invalid_argument);
}

TEST(DropDetections, OutputsSatisfyInvariants) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Scene d = drop_detections(random_scene(seed), 0.5, seed);
    EXPECT_NO_THROW(d.validate(true));
    EXPECT_EQ(drop_detections(random_scene(seed), 0.5, seed), d);
  }
}

TEST(SampleWindow, WholeSceneAndSingleFrame) {
  Scene s = random_scene(9);
  std::mt19937_64 rng(1);
  auto w = sample_window(s, s.frame_count, rng);
  EXPECT_EQ(w.start, 0u);
  EXPECT_EQ(w.length, s.frame_count);
  auto one = sample_window(s, 1, rng);
  EXPECT_EQ(one.length, 1u);
  EXPECT_LT(one.start, s.frame_count);
  EXPECT_THROW(sample_window(s, s.frame_count + 1, rng), std::invalid_argument);
}

TEST(SampleWindow, CoversAllStarts) {
  Scene s = random_scene(9, 2, 40);
  std::mt19937_64 rng(5);
  std::set<std::size_t> starts;
  for (int i = 0; i < 10000; ++i) starts.insert(sample_window(s, 16, rng).start);
  EXPECT_EQ(starts.size(), 40u - 16u + 1u);
}
