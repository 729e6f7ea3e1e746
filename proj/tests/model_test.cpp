#include "grouptr/model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "grouptr/errors.hpp"
#include "test_support.hpp"

namespace grouptr {
namespace {

using nn::NormMode;
using nn::Shape;
using nn::Tensor;

ModelConfig tiny_model() {
  ModelConfig c;
  c.app_dim = 8;
  c.f_dim = 6;
  c.z_dim = 8;
  c.stt.conv = {{4, 4, 8}, {4, 4, 8}};
  c.stt.dim = 8;
  c.stt.ff_dim = 8;
  c.stt.attention.heads = 2;
  return c;
}

std::vector<std::size_t> all_persons(const Scene& s) {
  std::vector<std::size_t> idx(s.persons.size());
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("grouptr_model_test_" + name);
}

TEST(ModelConfig, EdgeDimensions) {
  ModelConfig c;
  EXPECT_EQ(c.edge_dim(), 512u);
  c.stt.use_appearance = false;
  EXPECT_EQ(c.edge_dim(), 256u);
}

TEST(ModelConfig, RejectsIndivisibleHeads) {
  ModelConfig c = tiny_model();
  c.stt.attention.heads = 3;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(ModelInput, BuildsTensorsAndMask) {
  std::mt19937_64 rng(1);
  Scene scene = testing::random_scene(3, 6, 4, rng, 0.6);
  const FrameWindow window{0, 6};
  const auto in = make_model_input(scene, all_persons(scene), window, true);
  EXPECT_EQ(in.appearance.shape(), (Shape{3, 6, 4}));
  EXPECT_EQ(in.trajectory.shape(), (Shape{3, 5, 6}));
  for (std::size_t n = 0; n < 3; ++n) {
    const auto traj = build_trajectory_features(scene.persons[n], 0, 6);
    for (std::size_t i = 0; i < traj.values.size(); ++i) {
      EXPECT_EQ(in.trajectory[n * 30 + i], traj.values[i]);
    }
    for (std::size_t t = 0; t < 6; ++t) {
      EXPECT_EQ(in.visible[n * 6 + t], scene.persons[n].visible(t) ? 1 : 0);
      for (std::size_t d = 0; d < 4; ++d) {
        const double expect = scene.persons[n].visible(t) ? scene.persons[n].appearance[t][d] : 0.0;
        EXPECT_EQ(in.appearance[(n * 6 + t) * 4 + d], expect);
      }
    }
  }
}

TEST(ModelInput, PersonInvisibleInWindowThrows) {
  std::mt19937_64 rng(2);
  Scene scene = testing::random_scene(2, 4, 4, rng);
  for (std::size_t t = 1; t < 4; ++t) {
    scene.persons[1].boxes[t].reset();
    scene.persons[1].appearance[t].clear();
  }
  EXPECT_THROW(make_model_input(scene, {0, 1}, {1, 3}, true), ValidationError);
}

TEST(GroupTransformer, DeskDimensionChain) {
  ModelConfig config;
  config.app_dim = 64;
  auto model = GroupTransformer::create(config, 3);
  std::mt19937_64 rng(3);
  Scene scene = testing::random_scene(4, 5, 64, rng);
  const auto in = make_model_input(scene, all_persons(scene), {0, 5}, true);
  ShapeTrace trace;
  const std::vector<PairIndex> pairs{{0, 1}, {2, 3}};
  const Tensor c = model.score(in, pairs, NormMode::kTrain, &trace);
  EXPECT_EQ(c.shape(), (Shape{2}));
  std::map<std::string, Shape> m(trace.begin(), trace.end());
  EXPECT_EQ(m.at("occ.f"), (Shape{4, 5, 1024}));
  EXPECT_EQ(m.at("occ.z"), (Shape{4, 5, 512}));
  EXPECT_EQ(m.at("stt1.s.input"), (Shape{20, 640}));
  EXPECT_EQ(m.at("stt2.s.input"), (Shape{20, 256}));
  EXPECT_EQ(m.at("head.input"), (Shape{4, 512, 5}));
}

TEST(GroupTransformer, ScoreIsSymmetric) {
  auto model = GroupTransformer::create(tiny_model(), 4);
  std::mt19937_64 rng(4);
  Scene scene = testing::random_scene(4, 5, 8, rng, 0.7);
  const auto in = make_model_input(scene, all_persons(scene), {0, 5}, true);
  std::vector<PairIndex> pairs;
  for (std::size_t u = 0; u < 4; ++u) {
    for (std::size_t v = 0; v < 4; ++v) {
      if (u != v) pairs.push_back({u, v});
    }
  }
  const Tensor c = model.score(in, pairs, NormMode::kTrain);
  for (std::size_t e = 0; e < pairs.size(); ++e) {
    for (std::size_t f = 0; f < pairs.size(); ++f) {
      if (pairs[f].u == pairs[e].v && pairs[f].v == pairs[e].u) EXPECT_EQ(c[e], c[f]);
    }
  }
}

TEST(GroupTransformer, FullModelGradient) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto model = GroupTransformer::create(tiny_model(), 100 + seed);
    std::mt19937_64 rng(200 + seed);
    for (auto& p : model.parameters()) {
      if (p.name.ends_with(".b") && p.name.find(".conv") == std::string::npos) {
        for (auto& v : p.tensor.mutable_data()) v = 0.1 * std::uniform_real_distribution<double>(-1, 1)(rng);
      }
    }
    Scene scene = testing::random_scene(3, 4, 8, rng, 0.8);
    const auto in = make_model_input(scene, all_persons(scene), {0, 4}, true);
    const std::vector<PairIndex> pairs{{0, 1}, {0, 2}, {1, 2}};
    std::vector<PairIndex> usable;
    for (const auto& p : pairs) {
      bool covis = false;
      for (std::size_t t = 0; t < 4; ++t) covis |= in.visible[p.u * 4 + t] && in.visible[p.v * 4 + t];
      if (covis) usable.push_back(p);
    }
    const auto w = testing::random_weights(usable.size(), rng);
    std::vector<Tensor> point, conv_bias;
    for (auto& p : model.parameters()) {
      const bool structural_zero = p.name.find(".conv") != std::string::npos && p.name.ends_with(".b");
      (structural_zero ? conv_bias : point).push_back(p.tensor);
    }
    auto loss = [&] { return nn::dot_const(model.score(in, usable, NormMode::kTrain), w); };
    EXPECT_LT(nn::grad_check(loss, point), 1e-3) << "seed " << seed;
    for (const auto& b : conv_bias) {
      for (double g : b.grad()) EXPECT_LT(std::abs(g), 1e-10);
    }
  }
}

TEST(GroupTransformer, ParameterNamesAreUniqueAndComplete) {
  auto model = GroupTransformer::create(tiny_model(), 5);
  std::set<std::string> names;
  for (const auto& p : model.parameters()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
  for (const char* n : {"occ.f.W", "occ.f.b", "occ.g.W", "occ.g.b", "head.cls.W", "head.cls.b"}) {
    EXPECT_TRUE(names.count(n)) << n;
  }
  auto config = tiny_model();
  config.stt.use_appearance = false;
  auto ablation = GroupTransformer::create(config, 5);
  for (const auto& p : ablation.parameters()) EXPECT_FALSE(p.name.starts_with("occ.")) << p.name;
  EXPECT_EQ(ablation.head().in_dim(), 16u);
}

TEST(GroupTransformer, CheckpointRoundTrip) {
  auto model = GroupTransformer::create(tiny_model(), 6);
  std::mt19937_64 rng(6);
  Scene scene = testing::random_scene(4, 5, 8, rng, 0.8);
  const auto in = make_model_input(scene, all_persons(scene), {0, 5}, true);
  const std::vector<PairIndex> pairs{{0, 1}, {1, 2}, {0, 3}};
  model.features(in, NormMode::kTrain);
  const auto path = temp_path("roundtrip.gtck");
  model.save(path);
  auto loaded = GroupTransformer::load(path, tiny_model());
  EXPECT_EQ(loaded.to_checkpoint(), model.to_checkpoint());
  // the loaded model carries float32-rounded values
  auto rounded = GroupTransformer::from_checkpoint(model.to_checkpoint(), tiny_model());
  const Tensor a = loaded.score(in, pairs, NormMode::kEval);
  const Tensor b = rounded.score(in, pairs, NormMode::kEval);
  const Tensor c = model.score(in, pairs, NormMode::kEval);
  for (std::size_t e = 0; e < pairs.size(); ++e) {
    EXPECT_EQ(a[e], b[e]);
    EXPECT_NEAR(a[e], c[e], 1e-4);
  }
  std::filesystem::remove(path);
}

TEST(GroupTransformer, CheckpointWithoutStatsCannotRunEval) {
  auto model = GroupTransformer::create(tiny_model(), 7);
  auto entries = model.to_checkpoint();
  for (const auto& e : entries) EXPECT_FALSE(e.name.ends_with(".rm"));
  auto loaded = GroupTransformer::from_checkpoint(entries, tiny_model());
  std::mt19937_64 rng(7);
  Scene scene = testing::random_scene(2, 3, 8, rng);
  const auto in = make_model_input(scene, all_persons(scene), {0, 3}, true);
  const std::vector<PairIndex> pairs{{0, 1}};
  EXPECT_THROW(loaded.score(in, pairs, NormMode::kEval), std::logic_error);
}

TEST(GroupTransformer, TrajectoryOnlyCheckpointRoundTrip) {
  auto config = tiny_model();
  config.stt.use_appearance = false;
  auto model = GroupTransformer::create(config, 8);
  auto loaded = GroupTransformer::from_checkpoint(model.to_checkpoint(), tiny_model());
  EXPECT_FALSE(loaded.config().stt.use_appearance);
  EXPECT_EQ(loaded.config().edge_dim(), 16u);
}

TEST(GroupTransformer, CheckpointMismatchesRejected) {
  auto model = GroupTransformer::create(tiny_model(), 9);
  const auto entries = model.to_checkpoint();
  auto missing = entries;
  std::erase_if(missing, [](const CheckpointEntry& e) { return e.name == "stt2.s.enc1.wk.W"; });
  EXPECT_THROW(GroupTransformer::from_checkpoint(missing, tiny_model()), ValidationError);
  auto extra = entries;
  extra.push_back({"stt1.t.extra", {1}, {0.0f}});
  EXPECT_THROW(GroupTransformer::from_checkpoint(extra, tiny_model()), ValidationError);
  auto reshaped = entries;
  for (auto& e : reshaped) {
    if (e.name == "stt1.s.enc1.ff2.b") {
      e.dims = {e.data.size() + 1};
      e.data.push_back(0.0f);
    }
  }
  EXPECT_THROW(GroupTransformer::from_checkpoint(reshaped, tiny_model()), ValidationError);
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

TEST(Checkpoint, ByteLayout) {
  const auto path = temp_path("layout.gtck");
  save_checkpoint({{"ab", {2, 1}, {1.0f, -2.0f}}}, path);
  const std::string bytes = read_bytes(path);
  const std::string expect = std::string("GTCK") + std::string("\x01\x00\x00\x00", 4) +
                             std::string("\x01\x00\x00\x00", 4) + std::string("\x02\x00", 2) + "ab" +
                             std::string("\x02", 1) + std::string("\x02\x00\x00\x00", 4) +
                             std::string("\x01\x00\x00\x00", 4) +
                             std::string("\x00\x00\x80\x3f", 4) + std::string("\x00\x00\x00\xc0", 4);
  EXPECT_EQ(bytes, expect);
  const auto loaded = load_checkpoint(path);
  ASSERT_EQ(loaded.size(), 1u);
  EXPECT_EQ(loaded[0].name, "ab");
  EXPECT_EQ(loaded[0].dims, (Shape{2, 1}));
  EXPECT_EQ(loaded[0].data, (std::vector<float>{1.0f, -2.0f}));
  std::filesystem::remove(path);
}

TEST(Checkpoint, MalformedFilesRejected) {
  const auto path = temp_path("bad.gtck");
  EXPECT_THROW(load_checkpoint(temp_path("does_not_exist.gtck")), IoError);
  {
    std::ofstream out(path, std::ios::binary);
    out << "GTFT";
  }
  EXPECT_THROW(load_checkpoint(path), ValidationError);
  save_checkpoint({{"w", {3}, {1.0f, 2.0f, 3.0f}}}, path);
  std::string bytes = read_bytes(path);
  {
    std::ofstream out(path, std::ios::binary);
    out << bytes.substr(0, bytes.size() - 2);
  }
  EXPECT_THROW(load_checkpoint(path), ValidationError);
  {
    std::ofstream out(path, std::ios::binary);
    out << bytes << 'x';
  }
  EXPECT_THROW(load_checkpoint(path), ValidationError);
  EXPECT_THROW(save_checkpoint({{"w", {1}, {1.0f}}, {"w", {1}, {1.0f}}}, path), ValidationError);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace grouptr
