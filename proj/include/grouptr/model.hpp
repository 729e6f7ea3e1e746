#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "grouptr/checkpoint.hpp"
#include "grouptr/edge_head.hpp"
#include "grouptr/occlusion.hpp"
#include "grouptr/scene.hpp"
#include "grouptr/stt.hpp"
#include "grouptr/tensor.hpp"

namespace grouptr {

struct ModelConfig {
  std::size_t app_dim = 16384;
  std::size_t f_dim = 1024;
  std::size_t z_dim = 512;
  // stt.app_dim is taken from z_dim
  SttConfig stt;
  EdgePooling pooling = EdgePooling::kCovisible;

  // Input width of the edge classifier.
  std::size_t edge_dim() const;
  void validate() const;
};

/// Per-person model inputs over one frame window.
struct ModelInput {
  std::vector<std::size_t> persons;  // indices into Scene::persons
  FrameWindow window;
  nn::Tensor appearance;             // [N, T, D_app], undefined without appearance
  nn::Tensor trajectory;             // [N, 5, T]
  std::vector<std::uint8_t> visible; // N*T, row-major by person

  std::size_t size() const { return persons.size(); }
  std::size_t frames() const { return window.length; }
};

// Every listed person must be visible at least once inside the window.
ModelInput make_model_input(const Scene& scene, std::vector<std::size_t> persons, FrameWindow window,
                            bool with_appearance);

class GroupTransformer {
 public:
  static GroupTransformer create(const ModelConfig& config, std::uint64_t seed);

  // Shapes come from the entries; non-shape options (heads, residual mode,
  // masking, pooling) from `options`. Batchnorms without stored statistics
  // stay uninitialized.
  static GroupTransformer from_checkpoint(const std::vector<CheckpointEntry>& entries,
                                          ModelConfig options);
  static GroupTransformer load(const std::filesystem::path& path, const ModelConfig& options);

  std::vector<CheckpointEntry> to_checkpoint();
  void save(const std::filesystem::path& path);

  const ModelConfig& config() const { return config_; }

  // Z_all [N, edge_dim, T].
  nn::Tensor features(const ModelInput& input, nn::NormMode mode, ShapeTrace* trace = nullptr);
  // Logits [E].
  nn::Tensor score(const ModelInput& input, std::span<const PairIndex> pairs, nn::NormMode mode,
                   ShapeTrace* trace = nullptr);
  nn::Tensor score_features(const nn::Tensor& z_all, const ModelInput& input,
                            std::span<const PairIndex> pairs) const;

  std::vector<nn::NamedParam> parameters();
  void visit(const ParamVisitor& fn);

  OcclusionEncoderParams& occlusion() { return occ_; }
  SttStack& stt() { return stt_; }
  EdgeHeadParams& head() { return head_; }

 private:
  ModelConfig config_;
  OcclusionEncoderParams occ_;
  SttStack stt_;
  EdgeHeadParams head_;
};

}  // namespace grouptr
