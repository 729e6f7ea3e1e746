#include "grouptr/layers.hpp"

#include <cmath>

namespace grouptr {

using nn::Tensor;

Tensor kaiming_uniform(nn::Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (double& v : t.mutable_data()) v = dist(rng);
  return t;
}

Linear Linear::create(std::size_t in, std::size_t out, std::mt19937_64& rng, bool with_bias) {
  Linear l;
  l.weight = kaiming_uniform({in, out}, in, rng);
  if (with_bias) l.bias = Tensor::zeros({out}, true);
  return l;
}

Tensor Linear::operator()(const Tensor& x) const {
  if (bias.defined()) return nn::linear(x, weight, bias);
  return nn::matmul(x, weight);
}

void Linear::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".W", weight);
  if (bias.defined()) fn(prefix + ".b", bias);
}

LayerNorm LayerNorm::create(std::size_t dim) {
  return {Tensor::full({dim}, 1.0, true), Tensor::zeros({dim}, true)};
}

void LayerNorm::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".g", gamma);
  fn(prefix + ".b", beta);
}

}  // namespace grouptr
