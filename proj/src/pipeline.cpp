#include "grouptr/pipeline.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "config_parse.hpp"
#include "grouptr/errors.hpp"
#include "grouptr/evaluation.hpp"
#include "grouptr/parallel.hpp"

namespace grouptr {

using nn::Tensor;

// ---- configuration ----

TrainConfig TrainConfig::large_scale() {
  TrainConfig c;
  c.epochs = 200;
  c.sgd.schedule = {{50, 0.2}, {100, 0.2}, {150, 0.2}};
  c.delta_train = 0.1;
  return c;
}

TrainConfig TrainConfig::small_scale() {
  TrainConfig c;
  c.epochs = 20;
  c.delta_train = 0.5;
  return c;
}

void TrainConfig::validate() const {
  if (groups_per_iter == 0) throw ValidationError("groups_per_iter must be positive");
  if (grad_accum_iters == 0) throw ValidationError("grad_accum_iters must be positive");
  if (epochs <= 0) throw ValidationError("epochs must be positive");
  if (!(delta_train > 0.0)) throw ValidationError("delta_train must be positive");
  if (window == 0) throw ValidationError("window must be positive");
  try {
    sgd.validate();
  } catch (const std::exception& e) {
    throw ValidationError(e.what());
  }
}

InferConfig InferConfig::large_scale() {
  InferConfig c;
  c.delta_test = 0.2;
  c.gamma = 0.3;
  c.method = ClusterMethod::kLabelPropagation;
  return c;
}

InferConfig InferConfig::small_scale() {
  InferConfig c;
  c.delta_test = 0.75;
  c.gamma = 0.001;
  c.method = ClusterMethod::kSpectral;
  return c;
}

void InferConfig::validate() const {
  if (!(delta_test > 0.0)) throw ValidationError("delta_test must be positive");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ValidationError("gamma must lie in [0, 1]");
  if (label_propagation.max_iters <= 0) throw ValidationError("lp_max_iters must be positive");
  if (spectral.clusters && *spectral.clusters == 0) throw ValidationError("clusters must be positive");
}

void PipelineConfig::validate() const {
  model.validate();
  train.validate();
  infer.validate();
  if (!(train.delta_train < infer.delta_test)) {
    throw ValidationError("delta_train must be smaller than delta_test");
  }
}

namespace {

using config::Value;

std::vector<std::pair<int, double>> parse_schedule(const Value& r) {
  std::vector<std::pair<int, double>> schedule;
  if (r.text().empty() || r.text() == "none") return schedule;
  std::stringstream items(r.text());
  std::string item;
  while (std::getline(items, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) r.fail("epoch:factor pairs separated by commas");
    const std::string epoch = config::trim(item.substr(0, colon)), factor = config::trim(item.substr(colon + 1));
    int e = 0;
    double f = 0.0;
    auto [p1, ec1] = std::from_chars(epoch.data(), epoch.data() + epoch.size(), e);
    auto [p2, ec2] = std::from_chars(factor.data(), factor.data() + factor.size(), f);
    if (ec1 != std::errc() || p1 != epoch.data() + epoch.size() || ec2 != std::errc() ||
        p2 != factor.data() + factor.size()) {
      r.fail("epoch:factor pairs separated by commas");
    }
    schedule.emplace_back(e, f);
  }
  return schedule;
}

std::array<std::size_t, 3> parse_channels(const Value& r) {
  std::array<std::size_t, 3> channels{};
  std::stringstream items(r.text());
  std::string item;
  std::size_t n = 0;
  while (std::getline(items, item, ',')) {
    item = config::trim(item);
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (n == 3 || ec != std::errc() || p != item.data() + item.size() || v == 0) {
      r.fail("three positive channel counts separated by commas");
    }
    channels[n++] = v;
  }
  if (n != 3) r.fail("three positive channel counts separated by commas");
  return channels;
}

}  // namespace

PipelineConfig PipelineConfig::parse(const std::string& text) {
  auto entries = config::read_key_values(text);

  PipelineConfig c;
  if (auto it = entries.find("preset"); it != entries.end()) {
    const Value r("preset", it->second);
    if (r.text() == "large") {
      c.train = TrainConfig::large_scale();
      c.infer = InferConfig::large_scale();
    } else if (r.text() == "small") {
      c.train = TrainConfig::small_scale();
      c.infer = InferConfig::small_scale();
    } else {
      r.fail("large or small");
    }
    entries.erase(it);
  }

  for (const auto& [key, entry] : entries) {
    const Value r(key, entry);
    if (key == "appearance") c.model.stt.use_appearance = r.flag();
    else if (key == "f_dim") c.model.f_dim = r.count();
    else if (key == "z_dim") c.model.z_dim = r.count();
    else if (key == "temporal_channels") c.model.stt.conv.assign(c.model.stt.conv.size(), parse_channels(r));
    else if (key == "encoder_dim") c.model.stt.dim = r.count();
    else if (key == "ff_dim") c.model.stt.ff_dim = r.count();
    else if (key == "encoder_layers") c.model.stt.layers = r.count();
    else if (key == "heads") c.model.stt.attention.heads = r.count();
    else if (key == "residual") {
      if (r.text() == "value") c.model.stt.attention.residual = ResidualMode::kValue;
      else if (r.text() == "input") c.model.stt.attention.residual = ResidualMode::kInput;
      else r.fail("value or input");
    } else if (key == "attention_mask") c.model.stt.attention.mask_invisible = r.flag();
    else if (key == "edge_pooling") {
      if (r.text() == "covisible") c.model.pooling = EdgePooling::kCovisible;
      else if (r.text() == "all") c.model.pooling = EdgePooling::kAllFrames;
      else r.fail("covisible or all");
    } else if (key == "epochs") c.train.epochs = static_cast<int>(r.count());
    else if (key == "learning_rate") c.train.sgd.learning_rate = r.real();
    else if (key == "lr_schedule") c.train.sgd.schedule = parse_schedule(r);
    else if (key == "groups_per_iter") c.train.groups_per_iter = r.count();
    else if (key == "grad_accum_iters") c.train.grad_accum_iters = r.count();
    else if (key == "window") c.train.window = r.count();
    else if (key == "delta_train") c.train.delta_train = r.real();
    else if (key == "sample_singletons") c.train.sample_singletons = r.flag();
    else if (key == "seed") c.train.seed = r.count();
    else if (key == "delta_test") c.infer.delta_test = r.real();
    else if (key == "gamma") c.infer.gamma = r.real();
    else if (key == "clustering") {
      if (r.text() == "label_propagation") c.infer.method = ClusterMethod::kLabelPropagation;
      else if (r.text() == "spectral") c.infer.method = ClusterMethod::kSpectral;
      else r.fail("label_propagation or spectral");
    } else if (key == "clusters") {
      if (r.text() == "auto") c.infer.spectral.clusters.reset();
      else c.infer.spectral.clusters = r.count();
    } else if (key == "lp_max_iters") c.infer.label_propagation.max_iters = static_cast<int>(r.count());
    else if (key == "lp_threshold") c.infer.label_propagation.edge_threshold = r.real();
    else if (key == "cluster_seed") {
      c.infer.label_propagation.seed = r.count();
      c.infer.spectral.seed = r.count();
    } else {
      r.unknown();
    }
  }
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return parse(buf.str());
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

// ---- pair geometry ----

FrameWindow whole_scene(const Scene& scene) { return {0, scene.frame_count}; }

std::optional<double> min_trajectory_distance(const TrackedPerson& a, const TrackedPerson& b,
                                              FrameWindow window) {
  std::optional<double> best;
  for (std::size_t t = window.start; t < window.start + window.length; ++t) {
    if (!a.visible(t) || !b.visible(t)) continue;
    const double d = std::hypot(a.boxes[t]->center_x() - b.boxes[t]->center_x(),
                                a.boxes[t]->center_y() - b.boxes[t]->center_y());
    if (!best || d < *best) best = d;
  }
  return best;
}

double temporal_iou(const TrackedPerson& a, const TrackedPerson& b, FrameWindow window) {
  std::size_t both = 0, either = 0;
  for (std::size_t t = window.start; t < window.start + window.length; ++t) {
    both += a.visible(t) && b.visible(t);
    either += a.visible(t) || b.visible(t);
  }
  return either ? static_cast<double>(both) / static_cast<double>(either) : 0.0;
}

namespace {

Edge make_edge(int a, int b) { return a < b ? Edge{a, b, {}, {}} : Edge{b, a, {}, {}}; }

}  // namespace

std::vector<Edge> build_training_edges(const Scene& scene, std::span<const Group> groups,
                                       double delta_train, FrameWindow window) {
  struct Member {
    std::size_t person;
    std::size_t group;
  };
  std::vector<Member> members;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (int id : groups[g]) {
      const auto idx = scene.index_of(id);
      if (!idx) throw ValidationError("training edges: unknown person " + std::to_string(id));
      members.push_back({*idx, g});
    }
  }
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < members.size(); ++i) {
    for (std::size_t j = i + 1; j < members.size(); ++j) {
      const auto& a = scene.persons[members[i].person];
      const auto& b = scene.persons[members[j].person];
      if (a.id == b.id) throw ValidationError("training edges: person " + std::to_string(a.id) + " listed twice");
      const auto d = min_trajectory_distance(a, b, window);
      if (!d) continue;
      const bool positive = members[i].group == members[j].group;
      if (!positive && *d > delta_train) continue;
      Edge e = make_edge(a.id, b.id);
      e.label = positive ? 1 : 0;
      edges.push_back(e);
    }
  }
  return edges;
}

Tensor balanced_bce_loss(const Tensor& logits, std::span<const int> labels) {
  if (logits.numel() != labels.size() || labels.empty()) {
    throw ValidationError("balanced_bce_loss: need one label per logit and at least one edge");
  }
  const std::size_t n = labels.size();
  std::size_t positives = 0;
  for (int y : labels) positives += y == 1;
  const double lambda = static_cast<double>(positives) / static_cast<double>(n);
  std::vector<double> wp(n), wn(n);
  for (std::size_t e = 0; e < n; ++e) {
    wp[e] = labels[e] == 1 ? -(1.0 - lambda) : 0.0;
    wn[e] = labels[e] == 1 ? 0.0 : -lambda;
  }
  const Tensor flat = nn::reshape(logits, {n});
  return nn::add(nn::dot_const(nn::log_sigmoid(flat), wp),
                 nn::dot_const(nn::log_sigmoid(nn::scale(flat, -1.0)), wn));
}

// ---- training ----

std::optional<TrainingBatch> sample_training_batch(const Scene& scene, const TrainConfig& config,
                                                   bool with_appearance, std::mt19937_64& rng) {
  if (scene.groups.empty()) return std::nullopt;
  const FrameWindow window = sample_window(scene, std::min(config.window, scene.frame_count), rng);
  auto visible_in_window = [&](int id) {
    const auto& p = scene.persons[*scene.index_of(id)];
    for (std::size_t t = window.start; t < window.start + window.length; ++t) {
      if (p.visible(t)) return true;
    }
    return false;
  };

  std::vector<Group> candidates;
  std::set<int> grouped;
  for (const auto& g : scene.groups) {
    Group members;
    for (int id : g) {
      grouped.insert(id);
      if (visible_in_window(id)) members.push_back(id);
    }
    if (!members.empty()) candidates.push_back(std::move(members));
  }
  if (config.sample_singletons) {
    for (const auto& p : scene.persons) {
      if (!grouped.count(p.id) && visible_in_window(p.id)) candidates.push_back({p.id});
    }
  }
  std::shuffle(candidates.begin(), candidates.end(), rng);
  candidates.resize(std::min(candidates.size(), config.groups_per_iter));

  TrainingBatch batch;
  batch.edges = build_training_edges(scene, candidates, config.delta_train, window);
  if (batch.edges.empty()) return std::nullopt;

  std::vector<std::size_t> persons;
  for (const auto& g : candidates) {
    for (int id : g) persons.push_back(*scene.index_of(id));
  }
  std::sort(persons.begin(), persons.end());
  std::map<int, std::size_t> slot;
  for (std::size_t i = 0; i < persons.size(); ++i) slot[scene.persons[persons[i]].id] = i;
  for (const auto& e : batch.edges) {
    batch.pairs.push_back({slot.at(e.u), slot.at(e.v)});
    batch.labels.push_back(*e.label);
  }
  batch.input = make_model_input(scene, std::move(persons), window, with_appearance);
  return batch;
}

Tensor batch_loss(GroupTransformer& model, const TrainingBatch& batch, nn::NormMode mode) {
  return balanced_bce_loss(model.score(batch.input, batch.pairs, mode), batch.labels);
}

TrainResult train(const std::vector<Scene>& scenes, const PipelineConfig& config,
                  const TrainLogger& log) {
  config.validate();
  if (scenes.empty()) throw ValidationError("train: no scenes");
  const bool with_appearance = config.model.stt.use_appearance;
  bool any_group = false;
  for (const auto& s : scenes) {
    any_group |= !s.groups.empty();
    if (with_appearance && (!s.has_features() || s.app_dim != scenes.front().app_dim)) {
      throw ValidationError("train: every scene needs appearance features of the same dimension");
    }
  }
  if (!any_group) throw ValidationError("train: no scene has a ground-truth group");

  ModelConfig model_config = config.model;
  model_config.app_dim = scenes.front().app_dim;
  TrainResult result;
  result.model = GroupTransformer::create(model_config, config.train.seed);
  auto params = result.model.parameters();

  std::mt19937_64 rng(config.train.seed ^ 0x5851f42d4c957f2dULL);
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t pending = 0;
  for (int epoch = 0; epoch < config.train.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t s : order) {
      auto batch = sample_training_batch(scenes[s], config.train, with_appearance, rng);
      if (!batch) {
        ++result.skipped;
        if (log) log("epoch " + std::to_string(epoch) + ": scene " + std::to_string(s) + " has no usable edges, skipped");
        continue;
      }
      const Tensor loss = batch_loss(result.model, *batch, nn::NormMode::kTrain);
      if (!std::isfinite(loss.item())) {
        throw ValidationError("training diverged in epoch " + std::to_string(epoch) +
                              " (non-finite loss); lower learning_rate");
      }
      nn::backward(loss);
      result.iteration_loss.push_back(loss.item());
      total += loss.item();
      ++count;
      if (++pending == config.train.grad_accum_iters) {
        nn::sgd_step(params, config.train.sgd, epoch);
        ++result.steps;
        pending = 0;
      }
    }
    result.epoch_loss.push_back(count ? total / static_cast<double>(count) : 0.0);
    if (log) {
      std::ostringstream msg;
      msg << "epoch " << epoch << " loss " << result.epoch_loss.back() << " lr "
          << config.train.sgd.rate_at(epoch);
      log(msg.str());
    }
  }
  if (pending > 0) {
    nn::sgd_step(params, config.train.sgd, config.train.epochs - 1);
    ++result.steps;
  }
  return result;
}

// ---- inference ----

namespace {

std::vector<PairIndex> inference_pairs(const Scene& scene, const InferConfig& config) {
  const FrameWindow all = whole_scene(scene);
  std::vector<PairIndex> pairs;
  for (std::size_t i = 0; i < scene.persons.size(); ++i) {
    for (std::size_t j = i + 1; j < scene.persons.size(); ++j) {
      const auto& a = scene.persons[i];
      const auto& b = scene.persons[j];
      const auto d = min_trajectory_distance(a, b, all);
      if (!d || *d > config.delta_test) continue;
      if (temporal_iou(a, b, all) < config.gamma) continue;
      pairs.push_back({i, j});
    }
  }
  return pairs;
}

constexpr std::size_t kEdgeChunk = 1024;

}  // namespace

std::vector<Edge> build_inference_edges(const Scene& scene, const InferConfig& config) {
  config.validate();
  std::vector<Edge> edges;
  for (const auto& p : inference_pairs(scene, config)) {
    edges.push_back(make_edge(scene.persons[p.u].id, scene.persons[p.v].id));
  }
  std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
    return std::tie(a.u, a.v) < std::tie(b.u, b.v);
  });
  return edges;
}

AffinityMatrix infer_affinity(const Scene& scene, GroupTransformer& model, const InferConfig& config) {
  config.validate();
  const std::size_t n = scene.persons.size();
  AffinityMatrix a = AffinityMatrix::zeros(n);
  const auto pairs = inference_pairs(scene, config);
  if (pairs.empty()) return a;

  std::vector<std::size_t> persons(n);
  std::iota(persons.begin(), persons.end(), 0);
  const bool with_appearance = model.config().stt.use_appearance;
  const ModelInput input = make_model_input(scene, std::move(persons), whole_scene(scene), with_appearance);
  Tensor z;
  {
    nn::NoGradGuard no_grad;
    z = model.features(input, nn::NormMode::kEval);
  }
  const std::size_t chunks = (pairs.size() + kEdgeChunk - 1) / kEdgeChunk;
  std::vector<double> logits(pairs.size());
  parallel_for(chunks, [&](std::size_t c) {
    nn::NoGradGuard no_grad;
    const std::size_t begin = c * kEdgeChunk, end = std::min(pairs.size(), begin + kEdgeChunk);
    const std::span<const PairIndex> chunk(pairs.data() + begin, end - begin);
    const Tensor scores = model.score_features(z, input, chunk);
    std::copy(scores.data().begin(), scores.data().end(), logits.begin() + begin);
  });
  for (std::size_t e = 0; e < pairs.size(); ++e) {
    const double s = 1.0 / (1.0 + std::exp(-logits[e]));
    a.at(pairs[e].u, pairs[e].v) = s;
    a.at(pairs[e].v, pairs[e].u) = s;
  }
  return a;
}

std::vector<Group> cluster_groups(const Scene& scene, const AffinityMatrix& affinity,
                                  const InferConfig& config) {
  if (affinity.size != scene.persons.size()) throw ValidationError("affinity size differs from person count");
  const Labeling labels = config.method == ClusterMethod::kLabelPropagation
                              ? label_propagation(affinity, config.label_propagation)
                              : spectral_clustering(affinity, config.spectral);
  std::vector<Group> groups;
  for (const auto& members : extract_groups(labels)) {
    Group g;
    for (std::size_t idx : members) g.push_back(scene.persons[idx].id);
    std::sort(g.begin(), g.end());
    groups.push_back(std::move(g));
  }
  std::sort(groups.begin(), groups.end());
  return groups;
}

std::vector<Group> detect_groups(const Scene& scene, GroupTransformer& model, const InferConfig& config) {
  return cluster_groups(scene, infer_affinity(scene, model, config), config);
}

double calibrate_lp_threshold(const std::vector<Scene>& scenes, GroupTransformer& model,
                              const InferConfig& config, std::span<const double> candidates) {
  if (candidates.empty()) throw ValidationError("calibration needs at least one candidate threshold");
  if (scenes.empty()) throw ValidationError("calibration needs at least one scene");
  std::vector<AffinityMatrix> affinities;
  for (const auto& scene : scenes) affinities.push_back(infer_affinity(scene, model, config));

  std::vector<double> sorted(candidates.begin(), candidates.end());
  std::sort(sorted.begin(), sorted.end());
  double best = sorted.front(), best_f1 = -1.0;
  for (double threshold : sorted) {
    InferConfig trial = config;
    trial.method = ClusterMethod::kLabelPropagation;
    trial.label_propagation.edge_threshold = threshold;
    trial.validate();
    std::size_t matches = 0, detected = 0, truth = 0;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      const auto r = score_groups(cluster_groups(scenes[i], affinities[i], trial), scenes[i].groups);
      matches += r.matches.size();
      detected += r.detected;
      truth += r.ground_truth;
    }
    const double f1 = metrics_from_counts(matches, detected, truth).f1;
    if (f1 > best_f1) {
      best_f1 = f1;
      best = threshold;
    }
  }
  return best;
}

}  // namespace grouptr
