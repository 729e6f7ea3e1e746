#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <string>

#include "grouptr/tensor.hpp"

namespace grouptr {

// Called once per learnable or persistent tensor with its checkpoint name.
using ParamVisitor = std::function<void(const std::string& name, nn::Tensor& tensor)>;

// Uniform in [-sqrt(6/fan_in), sqrt(6/fan_in)].
nn::Tensor kaiming_uniform(nn::Shape shape, std::size_t fan_in, std::mt19937_64& rng);

struct Linear {
  nn::Tensor weight;  // [in, out]
  nn::Tensor bias;    // [out], undefined for bias-free layers

  static Linear create(std::size_t in, std::size_t out, std::mt19937_64& rng, bool with_bias = true);

  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }
  nn::Tensor operator()(const nn::Tensor& x) const;
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct LayerNorm {
  nn::Tensor gamma;
  nn::Tensor beta;

  static LayerNorm create(std::size_t dim);
  nn::Tensor operator()(const nn::Tensor& x) const { return nn::layer_norm(x, gamma, beta); }
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

}  // namespace grouptr
