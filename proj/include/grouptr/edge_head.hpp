#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "grouptr/layers.hpp"
#include "grouptr/stt.hpp"
#include "grouptr/tensor.hpp"

namespace grouptr {

struct EdgeHeadParams {
  Linear cls;  // C -> 1

  static EdgeHeadParams create(std::size_t in_dim, std::mt19937_64& rng);
  std::size_t in_dim() const { return cls.in_dim(); }
  void visit(const ParamVisitor& fn) { cls.visit("head.cls", fn); }
};

// Indices of the two endpoints within a batch.
struct PairIndex {
  std::size_t u = 0;
  std::size_t v = 0;

  friend bool operator==(const PairIndex&, const PairIndex&) = default;
};

enum class EdgePooling {
  kCovisible,  // mean of per-frame scores over frames where both are visible
  kAllFrames,  // mean over every frame of the window
};

// Concatenates (app_1 .. app_M, traj_1 .. traj_M) along channels: [N, C, T].
nn::Tensor collect_individual_features(const SttOutputs& outputs);

// |z_u - z_v|
nn::Tensor edge_feature(const nn::Tensor& zu, const nn::Tensor& zv);

// Per-(edge, frame) pooling weights, E*T values. `visible` holds N*T flags.
// Throws ValidationError for a pair with no co-visible frame.
std::vector<double> pooling_weights(std::span<const std::uint8_t> visible, std::size_t frames,
                                    std::span<const PairIndex> pairs, EdgePooling pooling);

// Logits [E] for pairs of rows of z_all [N, C, T].
nn::Tensor score_edges(const nn::Tensor& z_all, std::span<const PairIndex> pairs,
                       std::span<const double> weights, const EdgeHeadParams& params);

// Logit for one edge feature f [C, T].
nn::Tensor edge_score(const nn::Tensor& f, std::span<const std::uint8_t> covisible,
                      const EdgeHeadParams& params, EdgePooling pooling = EdgePooling::kCovisible);

}  // namespace grouptr
