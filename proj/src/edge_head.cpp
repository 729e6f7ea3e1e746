#include "grouptr/edge_head.hpp"

#include <string>

#include "grouptr/errors.hpp"

namespace grouptr {

using nn::Tensor;

EdgeHeadParams EdgeHeadParams::create(std::size_t in_dim, std::mt19937_64& rng) {
  return {Linear::create(in_dim, 1, rng)};
}

Tensor collect_individual_features(const SttOutputs& outputs) {
  std::vector<Tensor> parts(outputs.app);
  parts.insert(parts.end(), outputs.traj.begin(), outputs.traj.end());
  if (parts.empty()) throw nn::DimensionError("collect_individual_features: no depth outputs");
  return nn::concat(parts, 1);
}

Tensor edge_feature(const Tensor& zu, const Tensor& zv) { return nn::abs(nn::sub(zu, zv)); }

std::vector<double> pooling_weights(std::span<const std::uint8_t> visible, std::size_t frames,
                                    std::span<const PairIndex> pairs, EdgePooling pooling) {
  std::vector<double> w(pairs.size() * frames, 0.0);
  for (std::size_t e = 0; e < pairs.size(); ++e) {
    const auto [u, v] = pairs[e];
    if ((u + 1) * frames > visible.size() || (v + 1) * frames > visible.size()) {
      throw nn::DimensionError("pooling_weights: pair index out of range");
    }
    std::size_t count = 0;
    for (std::size_t t = 0; t < frames; ++t) {
      count += visible[u * frames + t] && visible[v * frames + t] ? 1 : 0;
    }
    if (count == 0) {
      throw ValidationError("edge (" + std::to_string(u) + ", " + std::to_string(v) +
                            ") has no co-visible frame");
    }
    for (std::size_t t = 0; t < frames; ++t) {
      if (pooling == EdgePooling::kAllFrames) {
        w[e * frames + t] = 1.0 / static_cast<double>(frames);
      } else if (visible[u * frames + t] && visible[v * frames + t]) {
        w[e * frames + t] = 1.0 / static_cast<double>(count);
      }
    }
  }
  return w;
}

Tensor score_edges(const Tensor& z_all, std::span<const PairIndex> pairs,
                   std::span<const double> weights, const EdgeHeadParams& params) {
  if (z_all.rank() != 3 || z_all.dim(1) != params.in_dim()) {
    throw nn::DimensionError("score_edges: expected [N," + std::to_string(params.in_dim()) +
                             ",T], got " + nn::to_string(z_all.shape()));
  }
  const std::size_t persons = z_all.dim(0), channels = z_all.dim(1), frames = z_all.dim(2);
  if (weights.size() != pairs.size() * frames) {
    throw nn::DimensionError("score_edges: expected one weight per edge and frame");
  }
  const Tensor rows = nn::reshape(nn::permute(z_all, {0, 2, 1}), {persons * frames, channels});
  std::vector<std::size_t> ru, rv;
  ru.reserve(pairs.size() * frames);
  rv.reserve(pairs.size() * frames);
  for (const auto& p : pairs) {
    if (p.u >= persons || p.v >= persons) throw nn::DimensionError("score_edges: pair index out of range");
    for (std::size_t t = 0; t < frames; ++t) {
      ru.push_back(p.u * frames + t);
      rv.push_back(p.v * frames + t);
    }
  }
  const Tensor f = edge_feature(nn::gather_rows(rows, ru), nn::gather_rows(rows, rv));
  const Tensor per_frame = nn::reshape(params.cls(f), {pairs.size() * frames});
  return nn::weighted_segment_sum(per_frame, weights, pairs.size());
}

Tensor edge_score(const Tensor& f, std::span<const std::uint8_t> covisible,
                  const EdgeHeadParams& params, EdgePooling pooling) {
  if (f.rank() != 2 || covisible.size() != f.dim(1)) {
    throw nn::DimensionError("edge_score: expected [C,T] with T co-visibility flags");
  }
  const std::size_t frames = f.dim(1);
  const PairIndex self{0, 0};
  const auto weights = pooling_weights(covisible, frames, {&self, 1}, pooling);
  const Tensor per_frame = params.cls(nn::permute(f, {1, 0}));
  return nn::reshape(nn::weighted_segment_sum(nn::reshape(per_frame, {frames}), weights, 1), {});
}

}  // namespace grouptr
