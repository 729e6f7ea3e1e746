#include "grouptr/gradcheck_suite.hpp"

#include <cmath>
#include <numeric>
#include <random>

#include "grouptr/occlusion.hpp"
#include "grouptr/pipeline.hpp"

namespace grouptr {

namespace {

using nn::NormMode;
using nn::Shape;
using nn::Tensor;

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> values(nn::shape_numel(shape));
  for (double& v : values) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(values), true);
}

std::vector<double> random_weights(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> w(n);
  for (double& v : w) v = dist(rng);
  return w;
}

// Scalar projection onto fixed random weights exercises every output element.
struct Projector {
  std::mt19937_64& rng;
  std::vector<std::vector<double>> weights;
  std::size_t next = 0;

  Tensor operator()(const Tensor& y) {
    if (next == weights.size()) weights.push_back(random_weights(y.numel(), rng));
    return nn::dot_const(y, weights[next++]);
  }
  void reset() { next = 0; }
};

using Case = std::function<double(std::mt19937_64&)>;

double check(std::vector<Tensor> point, std::mt19937_64& rng,
             const std::function<Tensor(std::vector<Tensor>&, Projector&)>& fn) {
  Projector project{rng, {}};
  return nn::grad_check(
      [&] {
        project.reset();
        return fn(point, project);
      },
      point);
}

Scene tiny_scene(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Scene scene;
  scene.frame_count = 4;
  scene.app_dim = 8;
  for (int n = 0; n < 3; ++n) {
    TrackedPerson p;
    p.id = n;
    p.boxes.resize(4);
    p.appearance.resize(4);
    for (std::size_t t = 0; t < 4; ++t) {
      // frame 0 always visible so every pair is co-visible
      if (t > 0 && u(rng) < 0.2) continue;
      const double x = 0.8 * u(rng), y = 0.8 * u(rng);
      p.boxes[t] = BoundingBox{x, y, x + 0.05 + 0.1 * u(rng), y + 0.1 + 0.1 * u(rng)};
      p.appearance[t].resize(8);
      for (auto& v : p.appearance[t]) v = static_cast<float>(u(rng));
    }
    scene.persons.push_back(std::move(p));
  }
  return scene;
}

std::vector<std::pair<std::string, Case>> op_cases() {
  std::vector<std::pair<std::string, Case>> cases;
  auto add = [&](std::string name, Case c) { cases.emplace_back(std::move(name), std::move(c)); };

  add("add_sub_mul_scale", [](std::mt19937_64& rng) {
    return check({random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)}, rng, [](auto& p, auto& proj) {
      return nn::add(proj(nn::mul(p[0], p[1])), proj(nn::scale(nn::sub(p[0], p[1]), 0.7)));
    });
  });
  add("abs", [](std::mt19937_64& rng) {
    return check({random_tensor({12}, rng)}, rng, [](auto& p, auto& proj) { return proj(nn::abs(p[0])); });
  });
  add("relu", [](std::mt19937_64& rng) {
    return check({random_tensor({12}, rng)}, rng, [](auto& p, auto& proj) { return proj(nn::relu(p[0])); });
  });
  add("sigmoid", [](std::mt19937_64& rng) {
    return check({random_tensor({12}, rng, -4, 4)}, rng, [](auto& p, auto& proj) { return proj(nn::sigmoid(p[0])); });
  });
  add("log_sigmoid", [](std::mt19937_64& rng) {
    return check({random_tensor({12}, rng, -4, 4)}, rng,
                 [](auto& p, auto& proj) { return proj(nn::log_sigmoid(p[0])); });
  });
  add("matmul", [](std::mt19937_64& rng) {
    return check({random_tensor({3, 4}, rng), random_tensor({4, 5}, rng)}, rng,
                 [](auto& p, auto& proj) { return proj(nn::matmul(p[0], p[1])); });
  });
  add("linear", [](std::mt19937_64& rng) {
    return check({random_tensor({3, 4}, rng), random_tensor({4, 5}, rng), random_tensor({5}, rng)}, rng,
                 [](auto& p, auto& proj) { return proj(nn::linear(p[0], p[1], p[2])); });
  });
  add("bmm", [](std::mt19937_64& rng) {
    return check({random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 3}, rng), random_tensor({2, 5, 4}, rng)}, rng,
                 [](auto& p, auto& proj) {
                   return nn::add(proj(nn::bmm(p[0], p[1])), proj(nn::bmm(p[0], p[2], true)));
                 });
  });
  add("conv1d", [](std::mt19937_64& rng) {
    return check({random_tensor({3, 4, 4}, rng), random_tensor({8, 4, 3}, rng), random_tensor({8}, rng)}, rng,
                 [](auto& p, auto& proj) { return proj(nn::conv1d_same(p[0], p[1], p[2])); });
  });
  add("batchnorm_train", [](std::mt19937_64& rng) {
    nn::RunningStats stats;
    return check({random_tensor({3, 4, 4}, rng), random_tensor({4}, rng), random_tensor({4}, rng)}, rng,
                 [&stats](auto& p, auto& proj) {
                   return proj(nn::batchnorm1d(p[0], p[1], p[2], NormMode::kTrain, stats));
                 });
  });
  add("batchnorm_eval", [](std::mt19937_64& rng) {
    nn::RunningStats stats;
    auto x = random_tensor({3, 4, 4}, rng);
    nn::batchnorm1d(x, Tensor::full({4}, 1.0), Tensor::zeros({4}), NormMode::kTrain, stats);
    return check({x, random_tensor({4}, rng), random_tensor({4}, rng)}, rng, [&stats](auto& p, auto& proj) {
      return proj(nn::batchnorm1d(p[0], p[1], p[2], NormMode::kEval, stats));
    });
  });
  add("layer_norm", [](std::mt19937_64& rng) {
    return check({random_tensor({3, 8}, rng), random_tensor({8}, rng), random_tensor({8}, rng)}, rng,
                 [](auto& p, auto& proj) { return proj(nn::layer_norm(p[0], p[1], p[2])); });
  });
  add("softmax", [](std::mt19937_64& rng) {
    return check({random_tensor({3, 5}, rng, -3, 3)}, rng,
                 [](auto& p, auto& proj) { return proj(nn::softmax_lastdim(p[0])); });
  });
  add("cosine_gram", [](std::mt19937_64& rng) {
    return check({random_tensor({3, 4, 8}, rng)}, rng, [](auto& p, auto& proj) { return proj(nn::cosine_gram(p[0])); });
  });
  add("shape_ops", [](std::mt19937_64& rng) {
    return check({random_tensor({3, 4, 2}, rng), random_tensor({3, 1, 2}, rng), random_tensor({6}, rng)}, rng,
                 [](auto& p, auto& proj) {
                   const std::vector<std::size_t> rows{5, 0, 2, 2};
                   auto joined = nn::concat({p[0], p[1]}, 1);                 // [3,5,2]
                   auto moved = nn::reshape(nn::permute(joined, {2, 0, 1}), {6, 5});
                   return proj(nn::row_scale(nn::gather_rows(moved, rows), nn::gather_rows(
                       nn::reshape(p[2], {6, 1}), rows)));
                 });
  });
  add("reductions", [](std::mt19937_64& rng) {
    const auto w = random_weights(12, rng);
    return check({random_tensor({12}, rng)}, rng, [w](auto& p, auto&) {
      return nn::add(nn::sum(nn::weighted_segment_sum(p[0], w, 3)), nn::dot_const(p[0], w));
    });
  });
  add("balanced_bce_loss", [](std::mt19937_64& rng) {
    const std::vector<int> labels{1, 0, 0, 1, 0, 0, 0};
    return check({random_tensor({7}, rng, -3, 3)}, rng,
                 [labels](auto& p, auto&) { return balanced_bce_loss(p[0], labels); });
  });
  add("occlusion_encoder", [](std::mt19937_64& rng) {
    auto params = OcclusionEncoderParams::create(8, 6, 8, rng);
    for (auto* b : {&params.f.bias, &params.g.bias}) {
      for (auto& v : b->mutable_data()) v = 0.1 * std::uniform_real_distribution<double>(-1, 1)(rng);
    }
    std::vector<std::uint8_t> visible(12, 1);
    visible[5] = visible[10] = 0;
    auto x = random_tensor({3, 4, 8}, rng, 0.0, 1.0);
    std::vector<Tensor> point{x, params.f.weight, params.f.bias, params.g.weight, params.g.bias};
    return check(point, rng, [&](auto& p, auto& proj) {
      return proj(encode_appearance(p[0], visible, params).z);
    });
  });
  return cases;
}

double full_model_case(std::mt19937_64& rng) {
  auto model = GroupTransformer::create(tiny_model_config(), rng());
  for (auto& p : model.parameters()) {
    // nonzero biases so relu kinks are not hit symmetrically
    if (p.name.ends_with(".b") && p.name.find(".conv") == std::string::npos) {
      for (auto& v : p.tensor.mutable_data()) v = 0.1 * std::uniform_real_distribution<double>(-1, 1)(rng);
    }
  }
  const Scene scene = tiny_scene(rng);
  auto input = make_model_input(scene, {0, 1, 2}, {0, 4}, true);
  const std::vector<PairIndex> pairs{{0, 1}, {0, 2}, {1, 2}};
  const std::vector<int> labels{1, 0, 0};
  std::vector<Tensor> point;
  for (auto& p : model.parameters()) {
    // conv biases ahead of train-mode batchnorm have identically zero gradient
    if (p.name.find(".conv") != std::string::npos && p.name.ends_with(".b")) continue;
    point.push_back(p.tensor);
  }
  input.appearance = Tensor::from(input.appearance.shape(),
                                  {input.appearance.data().begin(), input.appearance.data().end()}, true);
  point.push_back(input.appearance);
  return nn::grad_check(
      [&] { return balanced_bce_loss(model.score(input, pairs, NormMode::kTrain), labels); }, point);
}

}  // namespace

ModelConfig tiny_model_config() {
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

std::vector<GradCheckResult> run_gradcheck_suite(std::size_t seeds,
                                                 const std::function<void(const GradCheckResult&)>& report) {
  std::vector<GradCheckResult> results;
  auto record = [&](GradCheckResult r) {
    if (report) report(r);
    results.push_back(std::move(r));
  };
  for (const auto& [name, run] : op_cases()) {
    for (std::size_t s = 0; s < seeds; ++s) {
      std::mt19937_64 rng(1000 * s + 17);
      record({name, s, run(rng), kOpGradTolerance});
    }
  }
  for (std::size_t s = 0; s < seeds; ++s) {
    std::mt19937_64 rng(1000 * s + 29);
    record({"full_model", s, full_model_case(rng), kModelGradTolerance});
  }
  return results;
}

}  // namespace grouptr
