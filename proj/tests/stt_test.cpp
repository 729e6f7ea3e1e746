#include "grouptr/stt.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "test_support.hpp"

namespace grouptr {
namespace {

using nn::NormMode;
using nn::Shape;
using nn::Tensor;
using testing::random_tensor;

std::map<std::string, Shape> trace_map(const ShapeTrace& trace) {
  std::map<std::string, Shape> m;
  for (const auto& [name, shape] : trace) m[name] = shape;
  return m;
}

SttConfig tiny_config() {
  SttConfig c;
  c.traj_channels = 5;
  c.conv = {{4, 4, 8}, {4, 4, 8}};
  c.app_dim = 8;
  c.dim = 8;
  c.ff_dim = 8;
  c.layers = 2;
  c.attention.heads = 2;
  return c;
}

// Values of every tensor in `parts`, flattened.
std::vector<double> flatten(const std::vector<Tensor>& parts) {
  std::vector<double> out;
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return out;
}

Tensor stack_loss(const SttOutputs& out, std::span<const double> w) {
  std::vector<Tensor> parts;
  for (const auto& t : out.app) parts.push_back(nn::reshape(t, {t.numel()}));
  for (const auto& t : out.traj) parts.push_back(nn::reshape(t, {t.numel()}));
  return nn::dot_const(nn::concat(parts, 0), w);
}

// Gathers every parameter except conv biases, whose gradient is structurally
// zero in front of a train-mode batchnorm.
std::vector<Tensor> checkable_params(SttStack& stack, std::vector<Tensor>* conv_biases) {
  std::vector<Tensor> point;
  stack.visit([&](const std::string& name, Tensor& t) {
    if (name.find(".conv") != std::string::npos && name.ends_with(".b")) {
      if (conv_biases) conv_biases->push_back(t);
    } else {
      point.push_back(t);
    }
  });
  return point;
}

TEST(TemporalBranch, DenseChannelChainFirstDepth) {
  std::mt19937_64 rng(1);
  auto params = TemporalBranchParams::create(5, {64, 64, 128}, rng);
  ShapeTrace trace;
  const Tensor out =
      temporal_branch(random_tensor({3, 5, 7}, rng, false), params, NormMode::kTrain, &trace);
  EXPECT_EQ(out.shape(), (Shape{3, 128, 7}));
  const auto m = trace_map(trace);
  EXPECT_EQ(m.at("t.concat1"), (Shape{3, 69, 7}));
  EXPECT_EQ(m.at("t.concat2"), (Shape{3, 133, 7}));
}

TEST(TemporalBranch, DenseChannelChainSecondDepth) {
  std::mt19937_64 rng(2);
  auto params = TemporalBranchParams::create(128, {64, 64, 128}, rng);
  ShapeTrace trace;
  const Tensor out =
      temporal_branch(random_tensor({2, 128, 6}, rng, false), params, NormMode::kTrain, &trace);
  EXPECT_EQ(out.shape(), (Shape{2, 128, 6}));
  const auto m = trace_map(trace);
  EXPECT_EQ(m.at("t.concat1"), (Shape{2, 192, 6}));
  EXPECT_EQ(m.at("t.concat2"), (Shape{2, 256, 6}));
}

TEST(TemporalBranch, ChannelMismatchThrows) {
  std::mt19937_64 rng(3);
  auto params = TemporalBranchParams::create(5, {4, 4, 8}, rng);
  EXPECT_THROW(temporal_branch(random_tensor({2, 6, 4}, rng, false), params, NormMode::kTrain),
               nn::DimensionError);
}

TEST(TemporalBranch, GradientTrainMode) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(10 + seed);
    auto params = TemporalBranchParams::create(3, {2, 2, 4}, rng);
    Tensor x = random_tensor({2, 3, 5}, rng);
    const auto w = testing::random_weights(2 * 4 * 5, rng);
    std::vector<Tensor> point{x};
    for (std::size_t k = 0; k < 3; ++k) {
      point.push_back(params.conv_w[k]);
      point.push_back(params.bn_gamma[k]);
      point.push_back(params.bn_beta[k]);
    }
    auto loss = [&] { return nn::dot_const(temporal_branch(x, params, NormMode::kTrain), w); };
    EXPECT_LT(nn::grad_check(loss, point), 1e-4) << "seed " << seed;
    for (auto& b : params.conv_b) {
      for (double g : b.grad()) EXPECT_LT(std::abs(g), 1e-10);
    }
  }
}

TEST(TemporalBranch, GradientEvalModeIncludingBias) {
  std::mt19937_64 rng(20);
  auto params = TemporalBranchParams::create(3, {2, 2, 4}, rng);
  temporal_branch(random_tensor({4, 3, 5}, rng, false), params, NormMode::kTrain);
  Tensor x = random_tensor({2, 3, 5}, rng);
  const auto w = testing::random_weights(2 * 4 * 5, rng);
  std::vector<Tensor> point{x};
  params.visit("t", [&](const std::string&, Tensor& t) { point.push_back(t); });
  auto loss = [&] { return nn::dot_const(temporal_branch(x, params, NormMode::kEval), w); };
  EXPECT_LT(nn::grad_check(loss, point), 1e-4);
}

TEST(TemporalBranch, ReceptiveFieldIsThreeFrames) {
  std::mt19937_64 rng(30);
  auto params = TemporalBranchParams::create(5, {4, 4, 8}, rng);
  std::uniform_real_distribution<double> u(0.5, 2.0);
  for (auto& s : params.stats) {
    s.initialized = true;
  }
  for (std::size_t k = 0; k < 3; ++k) {
    const std::size_t c = params.conv_w[k].dim(0);
    params.stats[k].mean.assign(c, 0.1);
    params.stats[k].var.resize(c);
    for (auto& v : params.stats[k].var) v = u(rng);
  }
  const std::size_t frames = 16;
  Tensor x = random_tensor({2, 5, frames}, rng, false);
  const Tensor base = temporal_branch(x, params, NormMode::kEval);
  for (std::size_t t = 0; t < frames; ++t) {
    Tensor changed = x.detach();
    for (std::size_t n = 0; n < 2; ++n) {
      for (std::size_t c = 0; c < 5; ++c) changed.mutable_data()[(n * 5 + c) * frames + t] += 3.0;
    }
    const Tensor out = temporal_branch(changed, params, NormMode::kEval);
    for (std::size_t i = 0; i < out.numel(); ++i) {
      const std::size_t tp = i % frames;
      const std::size_t dist = tp > t ? tp - t : t - tp;
      if (dist > 3) ASSERT_EQ(out[i], base[i]) << "t=" << t << " t'=" << tp;
    }
  }
}

TEST(SpatialBranch, FirstDepthWidth) {
  std::mt19937_64 rng(40);
  auto params = SpatialBranchParams::create(640, 128, 128, 2, rng);
  ShapeTrace trace;
  const Tensor out =
      spatial_branch(random_tensor({3, 512, 4}, rng, false), random_tensor({3, 128, 4}, rng, false),
                     params, AttentionOptions{}, {}, &trace);
  EXPECT_EQ(out.shape(), (Shape{3, 128, 4}));
  EXPECT_EQ(trace_map(trace).at("s.input"), (Shape{12, 640}));
}

TEST(SpatialBranch, DimensionMismatchThrows) {
  std::mt19937_64 rng(41);
  auto params = SpatialBranchParams::create(16, 8, 8, 1, rng);
  EXPECT_THROW(spatial_branch(random_tensor({2, 7, 3}, rng, false),
                              random_tensor({2, 8, 3}, rng, false), params, {}, {}),
               nn::DimensionError);
  AttentionOptions three_heads;
  three_heads.heads = 3;
  EXPECT_THROW(spatial_branch(random_tensor({2, 8, 3}, rng, false),
                              random_tensor({2, 8, 3}, rng, false), params, three_heads, {}),
               nn::DimensionError);
}

// Reference for one person: attention is the identity, so each layer reduces
// to row-wise maps.
Tensor single_person_reference(const Tensor& rows, const SpatialBranchParams& p,
                               ResidualMode residual) {
  Tensor h = p.proj(rows);
  for (const auto& layer : p.layers) {
    const Tensor v = layer.wv(layer.ln1(h));
    Tensor o = residual == ResidualMode::kValue ? nn::add(v, v) : v;
    Tensor h2 = layer.wo(o);
    if (residual == ResidualMode::kInput) h2 = nn::add(h, h2);
    h = nn::add(h2, layer.ff2(nn::relu(layer.ff1(layer.ln2(h2)))));
  }
  return h;
}

TEST(SpatialBranch, SinglePersonIsFeedForward) {
  for (auto residual : {ResidualMode::kValue, ResidualMode::kInput}) {
    std::mt19937_64 rng(42);
    auto params = SpatialBranchParams::create(12, 8, 8, 2, rng);
    const std::size_t frames = 5;
    const Tensor app = random_tensor({1, 6, frames}, rng, false);
    const Tensor traj = random_tensor({1, 6, frames}, rng, false);
    AttentionOptions options;
    options.heads = 2;
    options.residual = residual;
    std::vector<Tensor> attention;
    const Tensor out = spatial_branch(app, traj, params, options, {}, nullptr, "s", &attention);
    for (const auto& a : attention) {
      for (double v : a.data()) EXPECT_EQ(v, 1.0);
    }
    // rows [T, 12]
    const Tensor rows = nn::permute(nn::reshape(nn::concat({app, traj}, 1), {12, frames}), {1, 0});
    const Tensor ref = single_person_reference(rows, params, residual);
    for (std::size_t t = 0; t < frames; ++t) {
      for (std::size_t d = 0; d < 8; ++d) EXPECT_NEAR(out[d * frames + t], ref[t * 8 + d], 1e-12);
    }
  }
}

TEST(SpatialBranch, AttentionRowsSumToOneAndMaskInvisibleKeys) {
  std::mt19937_64 rng(43);
  auto params = SpatialBranchParams::create(16, 8, 8, 2, rng);
  const std::size_t persons = 4, frames = 3, heads = 2;
  // person 2 invisible at frame 1; nobody visible at frame 2
  std::vector<std::uint8_t> vis(persons * frames, 1);
  vis[2 * frames + 1] = 0;
  for (std::size_t n = 0; n < persons; ++n) vis[n * frames + 2] = 0;
  AttentionOptions options;
  options.heads = heads;
  std::vector<Tensor> attention;
  spatial_branch(random_tensor({persons, 8, frames}, rng, false),
                 random_tensor({persons, 8, frames}, rng, false), params, options, vis, nullptr,
                 "s", &attention);
  ASSERT_EQ(attention.size(), 2u);
  for (const auto& a : attention) {
    ASSERT_EQ(a.shape(), (Shape{frames * heads, persons, persons}));
    for (std::size_t row = 0; row < frames * heads * persons; ++row) {
      double s = 0.0;
      for (std::size_t k = 0; k < persons; ++k) s += a[row * persons + k];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t q = 0; q < persons; ++q) {
        EXPECT_EQ(a[((1 * heads + h) * persons + q) * persons + 2], 0.0);
        EXPECT_GT(a[((2 * heads + h) * persons + q) * persons + 2], 0.0);
      }
    }
  }
}

TEST(SttStack, FullSizeDimensionChain) {
  std::mt19937_64 rng(50);
  SttConfig config;
  auto stack = SttStack::create(config, rng);
  ShapeTrace trace;
  const auto out = stt_forward(stack, random_tensor({3, 512, 4}, rng, false),
                               random_tensor({3, 5, 4}, rng, false), NormMode::kTrain, {}, &trace);
  ASSERT_EQ(out.app.size(), 2u);
  ASSERT_EQ(out.traj.size(), 2u);
  for (const auto& t : out.app) EXPECT_EQ(t.shape(), (Shape{3, 128, 4}));
  for (const auto& t : out.traj) EXPECT_EQ(t.shape(), (Shape{3, 128, 4}));
  const auto m = trace_map(trace);
  EXPECT_EQ(m.at("stt1.t.concat1")[1], 69u);
  EXPECT_EQ(m.at("stt1.t.concat2")[1], 133u);
  EXPECT_EQ(m.at("stt1.s.input")[1], 640u);
  EXPECT_EQ(m.at("stt2.t.concat1")[1], 192u);
  EXPECT_EQ(m.at("stt2.t.concat2")[1], 256u);
  EXPECT_EQ(m.at("stt2.s.input")[1], 256u);
}

TEST(SttStack, ParameterNames) {
  std::mt19937_64 rng(51);
  auto stack = SttStack::create(tiny_config(), rng);
  std::set<std::string> names;
  stack.visit([&](const std::string& name, Tensor&) { names.insert(name); });
  for (const char* n : {"stt1.t.conv1.W", "stt1.t.conv3.b", "stt2.t.bn2.g", "stt2.t.bn3.b",
                        "stt1.s.proj.W", "stt1.s.proj.b", "stt1.s.enc1.wq.W", "stt1.s.enc2.wo.b",
                        "stt2.s.enc2.ff2.W", "stt2.s.enc1.ln1.g", "stt2.s.enc2.ln2.b"}) {
    EXPECT_TRUE(names.count(n)) << n;
  }
  EXPECT_FALSE(names.count("stt1.s.enc1.wq.b"));
  std::vector<std::string> stats;
  stack.visit_stats([&](const std::string& prefix, nn::RunningStats&) { stats.push_back(prefix); });
  EXPECT_EQ(stats.size(), 6u);
  EXPECT_EQ(stats.front(), "stt1.t.bn1");
}

TEST(SttStack, TrajectoryOnlyHasNoSpatialBranch) {
  std::mt19937_64 rng(52);
  auto config = tiny_config();
  config.use_appearance = false;
  auto stack = SttStack::create(config, rng);
  const auto out = stt_forward(stack, Tensor{}, random_tensor({2, 5, 4}, rng, false),
                               NormMode::kTrain, {});
  EXPECT_TRUE(out.app.empty());
  EXPECT_EQ(out.traj.size(), 2u);
  bool spatial = false;
  stack.visit([&](const std::string& name, Tensor&) { spatial |= name.find(".s.") != std::string::npos; });
  EXPECT_FALSE(spatial);
}

TEST(SttStack, Deterministic) {
  std::mt19937_64 rng(53);
  auto stack = SttStack::create(tiny_config(), rng);
  const Tensor app = random_tensor({3, 8, 4}, rng, false);
  const Tensor traj = random_tensor({3, 5, 4}, rng, false);
  const auto a = stt_forward(stack, app, traj, NormMode::kTrain, {});
  const auto b = stt_forward(stack, app, traj, NormMode::kTrain, {});
  EXPECT_EQ(flatten(a.app), flatten(b.app));
  EXPECT_EQ(flatten(a.traj), flatten(b.traj));
}

Tensor permute_persons(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t row = x.numel() / x.dim(0);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    std::copy_n(x.data().begin() + perm[i] * row, row, out.begin() + i * row);
  }
  return Tensor::from(x.shape(), std::move(out));
}

TEST(SttStack, PermutationEquivariance) {
  std::mt19937_64 rng(54);
  SttConfig config = tiny_config();
  auto stack = SttStack::create(config, rng);
  const std::size_t persons = 6, frames = 5;
  const Tensor app = random_tensor({persons, 8, frames}, rng, false);
  const Tensor traj = random_tensor({persons, 5, frames}, rng, false);
  std::vector<std::uint8_t> vis(persons * frames, 1);
  vis[1 * frames + 2] = 0;
  vis[4 * frames + 0] = 0;
  for (auto mode : {NormMode::kTrain, NormMode::kEval}) {
    const auto base = stt_forward(stack, app, traj, mode, vis);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<std::size_t> perm(persons);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      std::vector<std::uint8_t> pvis(vis.size());
      for (std::size_t i = 0; i < persons; ++i) {
        std::copy_n(vis.begin() + perm[i] * frames, frames, pvis.begin() + i * frames);
      }
      const auto out =
          stt_forward(stack, permute_persons(app, perm), permute_persons(traj, perm), mode, pvis);
      double worst = 0.0;
      for (std::size_t d = 0; d < 2; ++d) {
        for (const auto* pair : {&out.app, &out.traj}) {
          const Tensor expect = permute_persons((pair == &out.app ? base.app : base.traj)[d], perm);
          const Tensor& got = (*pair)[d];
          for (std::size_t i = 0; i < got.numel(); ++i) {
            worst = std::max(worst, std::abs(got[i] - expect[i]));
          }
        }
      }
      EXPECT_LT(worst, 1e-9);
    }
  }
}

TEST(SttStack, FullStackGradient) {
  for (auto residual : {ResidualMode::kValue, ResidualMode::kInput}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      std::mt19937_64 rng(60 + seed);
      SttConfig config = tiny_config();
      config.attention.residual = residual;
      auto stack = SttStack::create(config, rng);
      const std::size_t persons = 3, frames = 4;
      Tensor app = random_tensor({persons, 8, frames}, rng);
      Tensor traj = random_tensor({persons, 5, frames}, rng);
      std::vector<std::uint8_t> vis(persons * frames, 1);
      vis[1 * frames + 3] = 0;
      std::vector<Tensor> biases;
      std::vector<Tensor> point = checkable_params(stack, &biases);
      point.push_back(app);
      point.push_back(traj);
      const auto w = testing::random_weights(4 * persons * 8 * frames, rng);
      auto loss = [&] { return stack_loss(stt_forward(stack, app, traj, NormMode::kTrain, vis), w); };
      EXPECT_LT(nn::grad_check(loss, point), 1e-3) << "seed " << seed;
      for (const auto& b : biases) {
        for (double g : b.grad()) EXPECT_LT(std::abs(g), 1e-10);
      }
    }
  }
}

}  // namespace
}  // namespace grouptr
