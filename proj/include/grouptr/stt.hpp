#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "grouptr/layers.hpp"
#include "grouptr/tensor.hpp"

namespace grouptr {

// Optional record of intermediate shapes, keyed like "stt1.t.concat1".
using ShapeTrace = std::vector<std::pair<std::string, nn::Shape>>;

/// Three densely connected conv1d(k=3) + batchnorm + relu blocks.
struct TemporalBranchParams {
  std::array<nn::Tensor, 3> conv_w;  // [out_k, in_k, 3]
  std::array<nn::Tensor, 3> conv_b;
  std::array<nn::Tensor, 3> bn_gamma;
  std::array<nn::Tensor, 3> bn_beta;
  std::array<nn::RunningStats, 3> stats;

  static TemporalBranchParams create(std::size_t in_channels, std::array<std::size_t, 3> out,
                                     std::mt19937_64& rng);

  std::size_t in_channels() const { return conv_w[0].dim(1); }
  std::size_t out_channels() const { return conv_w[2].dim(0); }
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct EncoderLayerParams {
  Linear wq, wk, wv;  // no bias
  Linear wo;
  Linear ff1, ff2;
  LayerNorm ln1, ln2;

  static EncoderLayerParams create(std::size_t dim, std::size_t ff_dim, std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

/// Input projection followed by pre-norm transformer encoder layers.
struct SpatialBranchParams {
  Linear proj;
  std::vector<EncoderLayerParams> layers;

  static SpatialBranchParams create(std::size_t in_dim, std::size_t dim, std::size_t ff_dim,
                                    std::size_t layers, std::mt19937_64& rng);

  std::size_t in_dim() const { return proj.in_dim(); }
  std::size_t dim() const { return proj.out_dim(); }
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

enum class ResidualMode {
  kValue,  // o = softmax(qk^T/sqrt(d)) v + v, then W_o
  kInput,  // h + W_o(softmax(qk^T/sqrt(d)) v)
};

struct AttentionOptions {
  std::size_t heads = 4;
  ResidualMode residual = ResidualMode::kValue;
  // Invisible persons are excluded as keys in that frame.
  bool mask_invisible = true;
};

struct SttDepth {
  TemporalBranchParams temporal;
  SpatialBranchParams spatial;  // empty in the trajectory-only variant
};

struct SttConfig {
  std::size_t traj_channels = 5;
  // conv output channels per depth
  std::vector<std::array<std::size_t, 3>> conv{{64, 64, 128}, {64, 64, 128}};
  std::size_t app_dim = 512;  // appearance width entering depth 1
  std::size_t dim = 128;
  std::size_t ff_dim = 128;
  std::size_t layers = 2;
  AttentionOptions attention;
  bool use_appearance = true;
};

// Called with the batchnorm prefix (e.g. "stt1.t.bn2") and its running stats.
using StatsVisitor = std::function<void(const std::string& prefix, nn::RunningStats& stats)>;

struct SttStack {
  std::vector<SttDepth> depths;
  AttentionOptions attention;
  bool use_appearance = true;

  static SttStack create(const SttConfig& config, std::mt19937_64& rng);
  void visit(const ParamVisitor& fn);
  void visit_stats(const StatsVisitor& fn);
};

// x[N, C, T] -> [N, out, T].
nn::Tensor temporal_branch(const nn::Tensor& x, TemporalBranchParams& params, nn::NormMode mode,
                           ShapeTrace* trace = nullptr, const std::string& tag = "t");

// app[N, D, T] and traj[N, C, T] -> [N, dim, T]. `visible` holds N*T flags
// (row-major by person) or is empty. Attention weights [T*heads, N, N] per
// layer are appended to `attention_out` when given.
nn::Tensor spatial_branch(const nn::Tensor& app, const nn::Tensor& traj,
                          const SpatialBranchParams& params, const AttentionOptions& options,
                          std::span<const std::uint8_t> visible, ShapeTrace* trace = nullptr,
                          const std::string& tag = "s",
                          std::vector<nn::Tensor>* attention_out = nullptr);

struct SttOutputs {
  std::vector<nn::Tensor> app;   // per depth, [N, dim, T]
  std::vector<nn::Tensor> traj;  // per depth, [N, out, T]
};

SttOutputs stt_forward(SttStack& stack, const nn::Tensor& app0, const nn::Tensor& traj0,
                       nn::NormMode mode, std::span<const std::uint8_t> visible,
                       ShapeTrace* trace = nullptr);

}  // namespace grouptr
