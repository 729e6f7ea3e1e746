#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "grouptr/clustering.hpp"
#include "grouptr/model.hpp"
#include "grouptr/scene.hpp"
#include "grouptr/tensor.hpp"

namespace grouptr {

struct TrainConfig {
  std::size_t groups_per_iter = 8;
  std::size_t grad_accum_iters = 10;
  nn::SgdConfig sgd;
  int epochs = 20;
  double delta_train = 0.5;
  std::size_t window = 16;
  // Ungrouped persons visible in the window are sampled as one-person groups.
  bool sample_singletons = true;
  std::uint64_t seed = 0;

  // 200 epochs, rate divided by 5 at epochs 50, 100 and 150.
  static TrainConfig large_scale();
  // 20 epochs at a flat rate.
  static TrainConfig small_scale();
  void validate() const;
};

enum class ClusterMethod { kLabelPropagation, kSpectral };

struct InferConfig {
  double delta_test = 0.75;
  double gamma = 0.001;
  ClusterMethod method = ClusterMethod::kLabelPropagation;
  LabelPropagationOptions label_propagation;
  SpectralOptions spectral;

  // delta 0.2, gamma 0.3, label propagation.
  static InferConfig large_scale();
  // delta 0.75, gamma 0.001, spectral clustering.
  static InferConfig small_scale();
  void validate() const;
};

/// Everything a config file can set. Defaults are the small-scale preset.
struct PipelineConfig {
  ModelConfig model;
  TrainConfig train = TrainConfig::small_scale();
  InferConfig infer = InferConfig::small_scale();

  void validate() const;
  // UTF-8 "key = value" lines; '#' starts a comment. Unknown keys and bad
  // values throw ValidationError naming the line.
  static PipelineConfig parse(const std::string& text);
  static PipelineConfig load(const std::filesystem::path& path);
};

/// Undirected person pair, u < v by id.
struct Edge {
  int u = 0;
  int v = 0;
  std::optional<int> label;
  std::optional<double> score;

  friend bool operator==(const Edge&, const Edge&) = default;
};

// Whole scene when the window is empty.
FrameWindow whole_scene(const Scene& scene);

// Minimum Euclidean distance between box centers over co-visible frames of
// the window; nullopt when the two are never visible together.
std::optional<double> min_trajectory_distance(const TrackedPerson& a, const TrackedPerson& b,
                                              FrameWindow window);
// |frames both visible| / |frames either visible| within the window.
double temporal_iou(const TrackedPerson& a, const TrackedPerson& b, FrameWindow window);

// Labeled edges among members of the given groups (lists of person ids; a
// one-person list contributes negatives only). Positive pairs are kept
// whenever they share a visible frame in the window; negative pairs are
// dropped if never co-visible or farther apart than delta_train.
std::vector<Edge> build_training_edges(const Scene& scene, std::span<const Group> groups,
                                       double delta_train, FrameWindow window);

// -sum[(1-λ) y log σ(c) + λ (1-y) log(1-σ(c))], λ = positives / edges.
nn::Tensor balanced_bce_loss(const nn::Tensor& logits, std::span<const int> labels);

struct TrainingBatch {
  ModelInput input;
  std::vector<Edge> edges;
  std::vector<PairIndex> pairs;  // parallel to edges, indices into input
  std::vector<int> labels;
};

// Samples a window and up to groups_per_iter groups among those with a member
// visible in the window. Returns nullopt when no edge survives filtering.
std::optional<TrainingBatch> sample_training_batch(const Scene& scene, const TrainConfig& config,
                                                   bool with_appearance, std::mt19937_64& rng);

nn::Tensor batch_loss(GroupTransformer& model, const TrainingBatch& batch, nn::NormMode mode);

struct TrainResult {
  GroupTransformer model;
  std::vector<double> iteration_loss;
  std::vector<double> epoch_loss;  // mean iteration loss per epoch
  std::size_t skipped = 0;
  std::size_t steps = 0;
};

using TrainLogger = std::function<void(const std::string&)>;

// One sampled iteration per scene per epoch, scenes visited in a seeded order;
// gradients are summed and applied every grad_accum_iters iterations.
TrainResult train(const std::vector<Scene>& scenes, const PipelineConfig& config,
                  const TrainLogger& log = {});

// Unordered pairs that are co-visible, within delta_test and with temporal
// IoU at least gamma.
std::vector<Edge> build_inference_edges(const Scene& scene, const InferConfig& config);

// Sigmoid edge scores on retained pairs, indexed like scene.persons; 0 elsewhere.
AffinityMatrix infer_affinity(const Scene& scene, GroupTransformer& model, const InferConfig& config);

// Groups of person ids from an affinity matrix indexed like scene.persons.
std::vector<Group> cluster_groups(const Scene& scene, const AffinityMatrix& affinity,
                                  const InferConfig& config);

std::vector<Group> detect_groups(const Scene& scene, GroupTransformer& model,
                                 const InferConfig& config);

// Label-propagation threshold among `candidates` with the best pooled F1 on
// annotated scenes (ties go to the smaller threshold).
double calibrate_lp_threshold(const std::vector<Scene>& scenes, GroupTransformer& model,
                              const InferConfig& config, std::span<const double> candidates);

}  // namespace grouptr
