#include "grouptr/occlusion.hpp"

#include <cmath>
#include <string>

#include "grouptr/errors.hpp"

namespace grouptr {

using nn::Tensor;

OcclusionEncoderParams OcclusionEncoderParams::create(std::size_t app_dim, std::size_t f_dim,
                                                      std::size_t z_dim, std::mt19937_64& rng) {
  OcclusionEncoderParams p;
  p.f = Linear::create(app_dim, f_dim, rng);
  p.g = Linear::create(app_dim, z_dim, rng);
  return p;
}

void OcclusionEncoderParams::visit(const ParamVisitor& fn) {
  f.visit("occ.f", fn);
  g.visit("occ.g", fn);
}

double frame_similarity(std::span<const double> fi, std::span<const double> fj) {
  if (fi.size() != fj.size()) throw nn::DimensionError("frame_similarity: length mismatch");
  double dot = 0.0, ni = 0.0, nj = 0.0;
  for (std::size_t d = 0; d < fi.size(); ++d) {
    dot += fi[d] * fj[d];
    ni += fi[d] * fi[d];
    nj += fj[d] * fj[d];
  }
  ni = std::sqrt(ni);
  nj = std::sqrt(nj);
  if (ni < kSimilarityEpsilon || nj < kSimilarityEpsilon) return 0.0;
  return dot / (ni * nj + kSimilarityEpsilon);
}

std::vector<double> attention_values(std::span<const double> f, std::size_t frames,
                                     std::span<const std::uint8_t> visible) {
  if (frames == 0 || f.size() % frames != 0 || visible.size() != frames) {
    throw nn::DimensionError("attention_values: inconsistent frame count");
  }
  const std::size_t width = f.size() / frames;
  std::size_t n_visible = 0;
  for (auto v : visible) n_visible += v ? 1 : 0;
  if (n_visible == 0) throw ValidationError("attention_values: no visible frame");
  std::vector<double> a(frames, 0.0);
  for (std::size_t i = 0; i < frames; ++i) {
    if (!visible[i]) continue;
    double total = 0.0;
    for (std::size_t j = 0; j < frames; ++j) {
      if (!visible[j]) continue;
      total += frame_similarity(f.subspan(i * width, width), f.subspan(j * width, width));
    }
    a[i] = total / static_cast<double>(n_visible);
  }
  return a;
}

EncodedAppearance encode_appearance(const Tensor& x, std::span<const std::uint8_t> visible,
                                    const OcclusionEncoderParams& params) {
  if (x.rank() != 3 || x.dim(2) != params.app_dim()) {
    throw nn::DimensionError("encode_appearance: expected [N,T," + std::to_string(params.app_dim()) +
                             "], got " + nn::to_string(x.shape()));
  }
  const std::size_t persons = x.dim(0), frames = x.dim(1);
  if (visible.size() != persons * frames) {
    throw nn::DimensionError("encode_appearance: visibility mask has wrong size");
  }
  // weights[n,j,0] = vis_j / T_vis, mask[n,i] = vis_i
  std::vector<double> weights(persons * frames, 0.0), mask(persons * frames, 0.0);
  for (std::size_t n = 0; n < persons; ++n) {
    std::size_t count = 0;
    for (std::size_t t = 0; t < frames; ++t) count += visible[n * frames + t] ? 1 : 0;
    if (count == 0) {
      throw ValidationError("encode_appearance: person " + std::to_string(n) +
                            " has no visible frame");
    }
    for (std::size_t t = 0; t < frames; ++t) {
      if (!visible[n * frames + t]) continue;
      weights[n * frames + t] = 1.0 / static_cast<double>(count);
      mask[n * frames + t] = 1.0;
    }
  }

  const Tensor rows = nn::reshape(x, {persons * frames, params.app_dim()});
  const Tensor f = nn::reshape(nn::relu(params.f(rows)), {persons, frames, params.f_dim()});
  const Tensor sim = nn::cosine_gram(f);
  Tensor a = nn::bmm(sim, Tensor::from({persons, frames, 1}, std::move(weights)));
  a = nn::mul(nn::reshape(a, {persons * frames}), Tensor::from({persons * frames}, std::move(mask)));
  const Tensor z = nn::row_scale(nn::relu(params.g(rows)), a);
  return {nn::reshape(z, {persons, frames, params.z_dim()}), nn::reshape(a, {persons, frames}), f};
}

}  // namespace grouptr
