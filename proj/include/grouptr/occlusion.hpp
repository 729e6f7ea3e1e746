#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "grouptr/layers.hpp"
#include "grouptr/tensor.hpp"

namespace grouptr {

/// f and g branches of the occlusion encoder, each a linear layer plus relu.
struct OcclusionEncoderParams {
  Linear f;  // D_app -> D_f, feeds the similarity attention
  Linear g;  // D_app -> D_z, the encoded appearance

  static OcclusionEncoderParams create(std::size_t app_dim, std::size_t f_dim, std::size_t z_dim,
                                       std::mt19937_64& rng);

  std::size_t app_dim() const { return f.in_dim(); }
  std::size_t f_dim() const { return f.out_dim(); }
  std::size_t z_dim() const { return g.out_dim(); }
  void visit(const ParamVisitor& fn);
};

inline constexpr double kSimilarityEpsilon = 1e-12;

// Cosine similarity with a zero-norm guard.
double frame_similarity(std::span<const double> fi, std::span<const double> fj);

// f is row-major [T, D_f]. a_i is the mean similarity of frame i to all visible
// frames (itself included); invisible frames get 0. Throws ValidationError if
// no frame is visible.
std::vector<double> attention_values(std::span<const double> f, std::size_t frames,
                                     std::span<const std::uint8_t> visible);

struct EncodedAppearance {
  nn::Tensor z;          // [N, T, D_z]
  nn::Tensor attention;  // [N, T]
  nn::Tensor f;          // [N, T, D_f]
};

// x is [N, T, D_app], visible is N*T flags. Every person needs a visible frame.
EncodedAppearance encode_appearance(const nn::Tensor& x, std::span<const std::uint8_t> visible,
                                    const OcclusionEncoderParams& params);

}  // namespace grouptr
