#include "grouptr/model.hpp"

#include <map>
#include <random>
#include <string>

#include "grouptr/errors.hpp"

namespace grouptr {

using nn::Tensor;

std::size_t ModelConfig::edge_dim() const {
  std::size_t total = 0;
  for (const auto& conv : stt.conv) total += conv[2] + (stt.use_appearance ? stt.dim : 0);
  return total;
}

void ModelConfig::validate() const {
  if (stt.conv.empty()) throw ValidationError("model: at least one spatio-temporal depth is required");
  if (stt.use_appearance && (app_dim == 0 || f_dim == 0 || z_dim == 0)) {
    throw ValidationError("model: appearance dimensions must be positive");
  }
  for (const auto& conv : stt.conv) {
    for (auto c : conv) {
      if (c == 0) throw ValidationError("model: conv channels must be positive");
    }
  }
  if (stt.use_appearance) {
    if (stt.dim == 0 || stt.ff_dim == 0) throw ValidationError("model: encoder widths must be positive");
    if (stt.attention.heads == 0 || stt.dim % stt.attention.heads != 0) {
      throw ValidationError("model: width " + std::to_string(stt.dim) + " is not divisible by " +
                            std::to_string(stt.attention.heads) + " heads");
    }
  }
}

ModelInput make_model_input(const Scene& scene, std::vector<std::size_t> persons, FrameWindow window,
                            bool with_appearance) {
  if (window.length == 0 || window.start + window.length > scene.frame_count) {
    throw ValidationError("model input: window exceeds the scene");
  }
  const std::size_t n = persons.size(), frames = window.length;
  ModelInput in;
  in.window = window;
  in.visible.assign(n * frames, 0);
  std::vector<double> traj(n * kTrajectoryChannels * frames, 0.0);
  std::vector<double> app;
  if (with_appearance) app.assign(n * frames * scene.app_dim, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (persons[i] >= scene.persons.size()) throw ValidationError("model input: person index out of range");
    const auto& person = scene.persons[persons[i]];
    const auto feature = build_trajectory_features(person, window.start, frames);
    if (!feature.any_visible) {
      throw ValidationError("model input: person " + std::to_string(person.id) +
                            " is not visible in the window");
    }
    std::copy(feature.values.begin(), feature.values.end(),
              traj.begin() + i * kTrajectoryChannels * frames);
    for (std::size_t t = 0; t < frames; ++t) {
      if (!person.visible(window.start + t)) continue;
      in.visible[i * frames + t] = 1;
      if (!with_appearance) continue;
      const auto& f = person.appearance.at(window.start + t);
      if (f.size() != scene.app_dim) {
        throw ValidationError("model input: person " + std::to_string(person.id) +
                              " lacks appearance features");
      }
      std::copy(f.begin(), f.end(), app.begin() + (i * frames + t) * scene.app_dim);
    }
  }
  in.trajectory = Tensor::from({n, kTrajectoryChannels, frames}, std::move(traj));
  if (with_appearance) in.appearance = Tensor::from({n, frames, scene.app_dim}, std::move(app));
  in.persons = std::move(persons);
  return in;
}

GroupTransformer GroupTransformer::create(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  GroupTransformer m;
  m.config_ = config;
  m.config_.stt.app_dim = config.z_dim;
  std::mt19937_64 rng(seed);
  if (config.stt.use_appearance) {
    m.occ_ = OcclusionEncoderParams::create(config.app_dim, config.f_dim, config.z_dim, rng);
  }
  m.stt_ = SttStack::create(m.config_.stt, rng);
  m.head_ = EdgeHeadParams::create(m.config_.edge_dim(), rng);
  return m;
}

void GroupTransformer::visit(const ParamVisitor& fn) {
  if (config_.stt.use_appearance) occ_.visit(fn);
  stt_.visit(fn);
  head_.visit(fn);
}

std::vector<nn::NamedParam> GroupTransformer::parameters() {
  std::vector<nn::NamedParam> out;
  visit([&](const std::string& name, Tensor& t) { out.push_back({name, t}); });
  return out;
}

std::vector<CheckpointEntry> GroupTransformer::to_checkpoint() {
  std::vector<CheckpointEntry> entries;
  auto add = [&](const std::string& name, const nn::Shape& dims, std::span<const double> values) {
    entries.push_back({name, dims, std::vector<float>(values.begin(), values.end())});
  };
  visit([&](const std::string& name, Tensor& t) { add(name, t.shape(), t.data()); });
  stt_.visit_stats([&](const std::string& prefix, nn::RunningStats& stats) {
    if (!stats.initialized) return;
    add(prefix + ".rm", {stats.mean.size()}, stats.mean);
    add(prefix + ".rv", {stats.var.size()}, stats.var);
  });
  return entries;
}

void GroupTransformer::save(const std::filesystem::path& path) { save_checkpoint(to_checkpoint(), path); }

GroupTransformer GroupTransformer::from_checkpoint(const std::vector<CheckpointEntry>& entries,
                                                   ModelConfig options) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  auto dims = [&](const std::string& name) -> const nn::Shape& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ValidationError("checkpoint: missing entry " + name);
    return it->second->dims;
  };
  auto has = [&](const std::string& name) { return by_name.count(name) > 0; };
  auto dim_at = [&](const std::string& name, std::size_t axis) {
    const auto& d = dims(name);
    if (axis >= d.size()) throw ValidationError("checkpoint: entry " + name + " has rank " + std::to_string(d.size()));
    return d[axis];
  };

  ModelConfig config = options;
  config.stt.use_appearance = has("occ.f.W");
  if (config.stt.use_appearance) {
    config.app_dim = dim_at("occ.f.W", 0);
    config.f_dim = dim_at("occ.f.W", 1);
    config.z_dim = dim_at("occ.g.W", 1);
  }
  config.stt.conv.clear();
  for (std::size_t m = 1; has("stt" + std::to_string(m) + ".t.conv1.W"); ++m) {
    const std::string p = "stt" + std::to_string(m) + ".t.conv";
    config.stt.conv.push_back(
        {dim_at(p + "1.W", 0), dim_at(p + "2.W", 0), dim_at(p + "3.W", 0)});
  }
  if (config.stt.conv.empty()) throw ValidationError("checkpoint: missing entry stt1.t.conv1.W");
  config.stt.traj_channels = dim_at("stt1.t.conv1.W", 1);
  if (config.stt.use_appearance) {
    config.stt.dim = dim_at("stt1.s.proj.W", 1);
    config.stt.ff_dim = dim_at("stt1.s.enc1.ff1.W", 1);
    std::size_t layers = 0;
    while (has("stt1.s.enc" + std::to_string(layers + 1) + ".wq.W")) ++layers;
    config.stt.layers = layers;
  }

  GroupTransformer model = create(config, 0);
  std::size_t used = 0;
  auto fill = [&](const std::string& name, const nn::Shape& shape, std::span<double> target) {
    const auto& e = *by_name.at(name);
    if (e.dims != shape) {
      throw ValidationError("checkpoint: " + name + " has shape " + nn::to_string(e.dims) +
                            ", expected " + nn::to_string(shape));
    }
    std::copy(e.data.begin(), e.data.end(), target.begin());
    ++used;
  };
  model.visit([&](const std::string& name, Tensor& t) {
    dims(name);
    fill(name, t.shape(), t.mutable_data());
  });
  model.stt_.visit_stats([&](const std::string& prefix, nn::RunningStats& stats) {
    const bool rm = has(prefix + ".rm"), rv = has(prefix + ".rv");
    if (!rm && !rv) return;
    const std::size_t channels = dim_at(prefix + ".g", 0);
    stats.mean.assign(channels, 0.0);
    stats.var.assign(channels, 1.0);
    fill(prefix + ".rm", {channels}, stats.mean);
    fill(prefix + ".rv", {channels}, stats.var);
    stats.initialized = true;
  });
  if (used != entries.size()) {
    for (const auto& e : entries) {
      bool known = false;
      model.visit([&](const std::string& name, Tensor&) { known |= name == e.name; });
      known |= e.name.ends_with(".rm") || e.name.ends_with(".rv");
      if (!known) throw ValidationError("checkpoint: unexpected entry " + e.name);
    }
    throw ValidationError("checkpoint: unexpected entries");
  }
  return model;
}

GroupTransformer GroupTransformer::load(const std::filesystem::path& path, const ModelConfig& options) {
  return from_checkpoint(load_checkpoint(path), options);
}

Tensor GroupTransformer::features(const ModelInput& input, nn::NormMode mode, ShapeTrace* trace) {
  Tensor app0;
  if (config_.stt.use_appearance) {
    if (!input.appearance.defined()) throw ValidationError("model: appearance features required");
    const auto encoded = encode_appearance(input.appearance, input.visible, occ_);
    app0 = nn::permute(encoded.z, {0, 2, 1});
    if (trace) {
      trace->emplace_back("occ.f", encoded.f.shape());
      trace->emplace_back("occ.z", encoded.z.shape());
    }
  }
  const auto outputs = stt_forward(stt_, app0, input.trajectory, mode, input.visible, trace);
  Tensor z_all = collect_individual_features(outputs);
  if (trace) trace->emplace_back("head.input", z_all.shape());
  return z_all;
}

Tensor GroupTransformer::score_features(const Tensor& z_all, const ModelInput& input,
                                        std::span<const PairIndex> pairs) const {
  const auto weights = pooling_weights(input.visible, input.frames(), pairs, config_.pooling);
  return score_edges(z_all, pairs, weights, head_);
}

Tensor GroupTransformer::score(const ModelInput& input, std::span<const PairIndex> pairs,
                               nn::NormMode mode, ShapeTrace* trace) {
  return score_features(features(input, mode, trace), input, pairs);
}

}  // namespace grouptr
