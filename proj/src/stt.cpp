#include "grouptr/stt.hpp"

#include <cmath>

namespace grouptr {

using nn::Tensor;

namespace {

constexpr double kMasked = -1e30;

void record(ShapeTrace* trace, const std::string& name, const Tensor& t) {
  if (trace) trace->emplace_back(name, t.shape());
}

// [N, C, T] -> rows [T*N, C], frame-major.
Tensor to_frame_rows(const Tensor& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), t = x.dim(2);
  return nn::reshape(nn::permute(x, {2, 0, 1}), {t * n, c});
}

Tensor from_frame_rows(const Tensor& rows, std::size_t persons, std::size_t frames) {
  const std::size_t c = rows.dim(1);
  return nn::permute(nn::reshape(rows, {frames, persons, c}), {1, 2, 0});
}

// [T*N, H*dh] -> [T*H, N, dh]
Tensor split_heads(const Tensor& x, std::size_t frames, std::size_t persons, std::size_t heads) {
  const std::size_t dh = x.dim(1) / heads;
  const Tensor t = nn::reshape(x, {frames, persons, heads, dh});
  return nn::reshape(nn::permute(t, {0, 2, 1, 3}), {frames * heads, persons, dh});
}

Tensor merge_heads(const Tensor& x, std::size_t frames, std::size_t persons, std::size_t heads) {
  const std::size_t dh = x.dim(2);
  const Tensor t = nn::reshape(x, {frames, heads, persons, dh});
  return nn::reshape(nn::permute(t, {0, 2, 1, 3}), {frames * persons, heads * dh});
}

// Additive key mask [T*H, N, N], or undefined when nothing is masked. Frames
// with no visible person are left unmasked.
Tensor key_mask(std::span<const std::uint8_t> visible, std::size_t frames, std::size_t persons,
                std::size_t heads) {
  if (visible.empty()) return {};
  std::vector<double> mask(frames * heads * persons * persons, 0.0);
  bool any = false;
  for (std::size_t t = 0; t < frames; ++t) {
    bool frame_has_visible = false;
    for (std::size_t n = 0; n < persons; ++n) frame_has_visible |= visible[n * frames + t] != 0;
    if (!frame_has_visible) continue;
    for (std::size_t key = 0; key < persons; ++key) {
      if (visible[key * frames + t]) continue;
      any = true;
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t q = 0; q < persons; ++q) {
          mask[((t * heads + h) * persons + q) * persons + key] = kMasked;
        }
      }
    }
  }
  if (!any) return {};
  return Tensor::from({frames * heads, persons, persons}, std::move(mask));
}

Tensor encoder_layer(const Tensor& h, const EncoderLayerParams& p, const AttentionOptions& options,
                     const Tensor& mask, std::size_t frames, std::size_t persons,
                     std::vector<Tensor>* attention_out) {
  const std::size_t heads = options.heads;
  const std::size_t dh = h.dim(1) / heads;
  const Tensor y = p.ln1(h);
  const Tensor q = split_heads(p.wq(y), frames, persons, heads);
  const Tensor k = split_heads(p.wk(y), frames, persons, heads);
  const Tensor v = split_heads(p.wv(y), frames, persons, heads);
  Tensor logits = nn::scale(nn::bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (mask.defined()) logits = nn::add(logits, mask);
  const Tensor attn = nn::softmax_lastdim(logits);
  if (attention_out) attention_out->push_back(attn);
  Tensor o = nn::bmm(attn, v);
  if (options.residual == ResidualMode::kValue) o = nn::add(o, v);
  Tensor h2 = p.wo(merge_heads(o, frames, persons, heads));
  if (options.residual == ResidualMode::kInput) h2 = nn::add(h, h2);
  return nn::add(h2, p.ff2(nn::relu(p.ff1(p.ln2(h2)))));
}

}  // namespace

TemporalBranchParams TemporalBranchParams::create(std::size_t in_channels,
                                                  std::array<std::size_t, 3> out,
                                                  std::mt19937_64& rng) {
  TemporalBranchParams p;
  std::size_t in = in_channels;
  for (std::size_t k = 0; k < 3; ++k) {
    p.conv_w[k] = kaiming_uniform({out[k], in, 3}, in * 3, rng);
    p.conv_b[k] = Tensor::zeros({out[k]}, true);
    p.bn_gamma[k] = Tensor::full({out[k]}, 1.0, true);
    p.bn_beta[k] = Tensor::zeros({out[k]}, true);
    in += out[k];
  }
  return p;
}

void TemporalBranchParams::visit(const std::string& prefix, const ParamVisitor& fn) {
  for (std::size_t k = 0; k < 3; ++k) {
    const std::string n = std::to_string(k + 1);
    fn(prefix + ".conv" + n + ".W", conv_w[k]);
    fn(prefix + ".conv" + n + ".b", conv_b[k]);
    fn(prefix + ".bn" + n + ".g", bn_gamma[k]);
    fn(prefix + ".bn" + n + ".b", bn_beta[k]);
  }
}

EncoderLayerParams EncoderLayerParams::create(std::size_t dim, std::size_t ff_dim,
                                              std::mt19937_64& rng) {
  EncoderLayerParams p;
  p.wq = Linear::create(dim, dim, rng, false);
  p.wk = Linear::create(dim, dim, rng, false);
  p.wv = Linear::create(dim, dim, rng, false);
  p.wo = Linear::create(dim, dim, rng);
  p.ff1 = Linear::create(dim, ff_dim, rng);
  p.ff2 = Linear::create(ff_dim, dim, rng);
  p.ln1 = LayerNorm::create(dim);
  p.ln2 = LayerNorm::create(dim);
  return p;
}

void EncoderLayerParams::visit(const std::string& prefix, const ParamVisitor& fn) {
  wq.visit(prefix + ".wq", fn);
  wk.visit(prefix + ".wk", fn);
  wv.visit(prefix + ".wv", fn);
  wo.visit(prefix + ".wo", fn);
  ff1.visit(prefix + ".ff1", fn);
  ff2.visit(prefix + ".ff2", fn);
  ln1.visit(prefix + ".ln1", fn);
  ln2.visit(prefix + ".ln2", fn);
}

SpatialBranchParams SpatialBranchParams::create(std::size_t in_dim, std::size_t dim,
                                                std::size_t ff_dim, std::size_t layers,
                                                std::mt19937_64& rng) {
  SpatialBranchParams p;
  p.proj = Linear::create(in_dim, dim, rng);
  for (std::size_t l = 0; l < layers; ++l) p.layers.push_back(EncoderLayerParams::create(dim, ff_dim, rng));
  return p;
}

void SpatialBranchParams::visit(const std::string& prefix, const ParamVisitor& fn) {
  proj.visit(prefix + ".proj", fn);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    layers[l].visit(prefix + ".enc" + std::to_string(l + 1), fn);
  }
}

SttStack SttStack::create(const SttConfig& config, std::mt19937_64& rng) {
  SttStack stack;
  stack.attention = config.attention;
  stack.use_appearance = config.use_appearance;
  std::size_t traj_in = config.traj_channels;
  std::size_t app_in = config.app_dim;
  for (const auto& conv : config.conv) {
    SttDepth depth;
    depth.temporal = TemporalBranchParams::create(traj_in, conv, rng);
    if (config.use_appearance) {
      depth.spatial = SpatialBranchParams::create(app_in + conv[2], config.dim, config.ff_dim,
                                                  config.layers, rng);
    }
    stack.depths.push_back(std::move(depth));
    traj_in = conv[2];
    app_in = config.dim;
  }
  return stack;
}

void SttStack::visit(const ParamVisitor& fn) {
  for (std::size_t m = 0; m < depths.size(); ++m) {
    const std::string prefix = "stt" + std::to_string(m + 1);
    depths[m].temporal.visit(prefix + ".t", fn);
    if (use_appearance) depths[m].spatial.visit(prefix + ".s", fn);
  }
}

void SttStack::visit_stats(const StatsVisitor& fn) {
  for (std::size_t m = 0; m < depths.size(); ++m) {
    for (std::size_t k = 0; k < 3; ++k) {
      fn("stt" + std::to_string(m + 1) + ".t.bn" + std::to_string(k + 1),
         depths[m].temporal.stats[k]);
    }
  }
}

Tensor temporal_branch(const Tensor& x, TemporalBranchParams& params, nn::NormMode mode,
                       ShapeTrace* trace, const std::string& tag) {
  if (x.rank() != 3 || x.dim(1) != params.in_channels()) {
    throw nn::DimensionError("temporal_branch: expected " + std::to_string(params.in_channels()) +
                             " input channels, got shape " + nn::to_string(x.shape()));
  }
  Tensor input = x;
  Tensor out;
  for (std::size_t k = 0; k < 3; ++k) {
    out = nn::conv1d_same(input, params.conv_w[k], params.conv_b[k]);
    out = nn::relu(nn::batchnorm1d(out, params.bn_gamma[k], params.bn_beta[k], mode, params.stats[k]));
    if (k < 2) {
      input = nn::concat({input, out}, 1);
      record(trace, tag + ".concat" + std::to_string(k + 1), input);
    }
  }
  record(trace, tag + ".out", out);
  return out;
}

Tensor spatial_branch(const Tensor& app, const Tensor& traj, const SpatialBranchParams& params,
                      const AttentionOptions& options, std::span<const std::uint8_t> visible,
                      ShapeTrace* trace, const std::string& tag,
                      std::vector<Tensor>* attention_out) {
  if (app.rank() != 3 || traj.rank() != 3 || app.dim(0) != traj.dim(0) ||
      app.dim(2) != traj.dim(2) || app.dim(1) + traj.dim(1) != params.in_dim()) {
    throw nn::DimensionError("spatial_branch: inputs " + nn::to_string(app.shape()) + " and " +
                             nn::to_string(traj.shape()) + " do not give width " +
                             std::to_string(params.in_dim()));
  }
  if (options.heads == 0 || params.dim() % options.heads != 0) {
    throw nn::DimensionError("spatial_branch: width " + std::to_string(params.dim()) +
                             " not divisible by " + std::to_string(options.heads) + " heads");
  }
  const std::size_t persons = app.dim(0), frames = app.dim(2);
  if (!visible.empty() && visible.size() != persons * frames) {
    throw nn::DimensionError("spatial_branch: visibility mask has wrong size");
  }
  const Tensor rows = to_frame_rows(nn::concat({app, traj}, 1));
  record(trace, tag + ".input", rows);
  Tensor h = params.proj(rows);
  const Tensor mask =
      options.mask_invisible ? key_mask(visible, frames, persons, options.heads) : Tensor{};
  for (const auto& layer : params.layers) {
    h = encoder_layer(h, layer, options, mask, frames, persons, attention_out);
  }
  Tensor out = from_frame_rows(h, persons, frames);
  record(trace, tag + ".out", out);
  return out;
}

SttOutputs stt_forward(SttStack& stack, const Tensor& app0, const Tensor& traj0, nn::NormMode mode,
                       std::span<const std::uint8_t> visible, ShapeTrace* trace) {
  SttOutputs out;
  Tensor traj = traj0;
  Tensor app = app0;
  for (std::size_t m = 0; m < stack.depths.size(); ++m) {
    const std::string prefix = "stt" + std::to_string(m + 1);
    traj = temporal_branch(traj, stack.depths[m].temporal, mode, trace, prefix + ".t");
    out.traj.push_back(traj);
    if (stack.use_appearance) {
      app = spatial_branch(app, traj, stack.depths[m].spatial, stack.attention, visible, trace,
                           prefix + ".s");
      out.app.push_back(app);
    }
  }
  return out;
}

}  // namespace grouptr
