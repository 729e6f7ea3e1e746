#include "grouptr/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "grouptr/parallel.hpp"

namespace grouptr::nn {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap cmap(const std::vector<double>& v, std::size_t offset, std::size_t rows,
              std::size_t cols) {
  return ConstMap(v.data() + offset, static_cast<Eigen::Index>(rows),
                  static_cast<Eigen::Index>(cols));
}

MutMap mmap(std::vector<double>& v, std::size_t offset, std::size_t rows, std::size_t cols) {
  return MutMap(v.data() + offset, static_cast<Eigen::Index>(rows),
                static_cast<Eigen::Index>(cols));
}

thread_local bool g_grad_enabled = true;

NodePtr new_node(Shape shape, const char* op, std::initializer_list<const Tensor*> inputs) {
  auto node = std::make_shared<Node>();
  node->value.assign(shape_numel(shape), 0.0);
  node->shape = std::move(shape);
  node->op = op;
  for (const Tensor* t : inputs) {
    if (g_grad_enabled && t->requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    for (const Tensor* t : inputs) node->inputs.push_back(t->node());
  }
  return node;
}

// Gradient buffer of input `i`, or nullptr when that input is not tracked.
std::vector<double>* input_grad(Node& self, std::size_t i) {
  Node& in = *self.inputs[i];
  if (!in.requires_grad) return nullptr;
  return &in.ensure_grad();
}

void require(bool ok, const std::string& message) {
  if (!ok) throw DimensionError(message);
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                                      " vs " + to_string(b.shape()));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  require_defined(t, op);
  require(t.rank() == rank, std::string(op) + ": " + what + " must have rank " +
                                std::to_string(rank) + ", got " + to_string(t.shape()));
}

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::vector<double>& detail::Node::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

// ---- Tensor -------------------------------------------------------------------

Tensor Tensor::wrap(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive: " + to_string(shape));
  }
  auto node = std::make_shared<Node>();
  node->value.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return wrap(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  Tensor t = zeros(shape, requires_grad);
  if (values.size() != t.numel()) {
    throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                         to_string(shape));
  }
  t.node_->value = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) { return full({1}, value, requires_grad); }

const Shape& Tensor::shape() const {
  if (!node_) throw std::logic_error("shape of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->value.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!node_) return {};
  return node_->value;
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw std::logic_error("write to undefined tensor");
  if (!node_->inputs.empty()) throw std::logic_error("only leaf tensors are writable");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() requires a single-element tensor, got " + to_string(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_ && !node_->backward; }
bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) return {};
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!node_) throw std::logic_error("grad of undefined tensor");
  return node_->ensure_grad();
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const {
  if (!node_) return {};
  return from(node_->shape, node_->value, false);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- Tape ---------------------------------------------------------------------

Tape Tape::record(const Tensor& root) {
  Tape tape;
  tape.root_ = root.node();
  if (!root.requires_grad()) return tape;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS; a node is emitted after all of its inputs.
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      tape.order_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

void Tape::run_backward() {
  if (order_.empty()) return;
  for (Node* n : order_) {
    if (n->backward) n->grad.assign(n->value.size(), 0.0);
  }
  Node* root = order_.back();
  auto& g = root->ensure_grad();
  for (double& v : g) v += 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

void backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1) throw DimensionError("backward requires a scalar loss, got " + to_string(loss.shape()));
  Tape::record(loss).run_backward();
}

// ---- elementwise ------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto out = new_node(a.shape(), "add", {&a, &b});
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = a[i] + b[i];
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      for (std::size_t k = 0; k < 2; ++k) {
        if (auto* g = input_grad(self, k)) {
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
        }
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto out = new_node(a.shape(), "sub", {&a, &b});
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = a[i] - b[i];
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      if (auto* g = input_grad(self, 0)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
      if (auto* g = input_grad(self, 1)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto out = new_node(a.shape(), "mul", {&a, &b});
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = a[i] * b[i];
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      const auto& av = self.inputs[0]->value;
      const auto& bv = self.inputs[1]->value;
      if (auto* g = input_grad(self, 0)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
      }
      if (auto* g = input_grad(self, 1)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor scale(const Tensor& a, double factor) {
  require_defined(a, "scale");
  auto out = new_node(a.shape(), "scale", {&a});
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = a[i] * factor;
  if (out->requires_grad) {
    out->backward = [factor](Node& self) {
      auto& g = *input_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
    };
  }
  return Tensor::wrap(out);
}

Tensor abs(const Tensor& a) {
  require_defined(a, "abs");
  auto out = new_node(a.shape(), "abs", {&a});
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = std::fabs(a[i]);
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      const auto& x = self.inputs[0]->value;
      auto& g = *input_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double sign = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
        g[i] += self.grad[i] * sign;
      }
    };
  }
  return Tensor::wrap(out);
}

namespace {

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor pointwise(const Tensor& x, Pointwise fn) {
  require_defined(x, "pointwise");
  auto out = new_node(x.shape(), "pointwise", {&x});
  auto& y = out->value;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double v = x[i];
    switch (fn) {
      case Pointwise::kRelu: y[i] = v > 0.0 ? v : 0.0; break;
      case Pointwise::kSigmoid: y[i] = stable_sigmoid(v); break;
      case Pointwise::kLogSigmoid: y[i] = std::min(v, 0.0) - std::log1p(std::exp(-std::fabs(v))); break;
    }
  }
  if (out->requires_grad) {
    out->backward = [fn](Node& self) {
      const auto& in = self.inputs[0]->value;
      auto& g = *input_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        double d = 0.0;
        switch (fn) {
          case Pointwise::kRelu: d = in[i] > 0.0 ? 1.0 : 0.0; break;
          case Pointwise::kSigmoid: d = self.value[i] * (1.0 - self.value[i]); break;
          case Pointwise::kLogSigmoid: d = stable_sigmoid(-in[i]); break;
        }
        g[i] += self.grad[i] * d;
      }
    };
  }
  return Tensor::wrap(out);
}

// ---- linear algebra --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul", "lhs");
  require_rank(b, 2, "matmul", "rhs");
  require(a.dim(1) == b.dim(0), "matmul: inner dimensions differ " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = new_node({m, n}, "matmul", {&a, &b});
  mmap(out->value, 0, m, n).noalias() = cmap(a.node()->value, 0, m, k) * cmap(b.node()->value, 0, k, n);
  if (out->requires_grad) {
    out->backward = [m, k, n](Node& self) {
      auto dy = cmap(self.grad, 0, m, n);
      if (auto* g = input_grad(self, 0)) {
        mmap(*g, 0, m, k).noalias() += dy * cmap(self.inputs[1]->value, 0, k, n).transpose();
      }
      if (auto* g = input_grad(self, 1)) {
        mmap(*g, 0, k, n).noalias() += cmap(self.inputs[0]->value, 0, m, k).transpose() * dy;
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear", "input");
  require_rank(weight, 2, "linear", "weight");
  require_rank(bias, 1, "linear", "bias");
  require(x.dim(1) == weight.dim(0) && weight.dim(1) == bias.dim(0),
          "linear: dimension mismatch, input " + to_string(x.shape()) + " weight " +
              to_string(weight.shape()) + " bias " + to_string(bias.shape()));
  const std::size_t rows = x.dim(0), din = x.dim(1), dout = weight.dim(1);
  auto out = new_node({rows, dout}, "linear", {&x, &weight, &bias});
  auto y = mmap(out->value, 0, rows, dout);
  y.noalias() = cmap(x.node()->value, 0, rows, din) * cmap(weight.node()->value, 0, din, dout);
  y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.node()->value.data(), static_cast<Eigen::Index>(dout));
  if (out->requires_grad) {
    out->backward = [rows, din, dout](Node& self) {
      auto dy = cmap(self.grad, 0, rows, dout);
      if (auto* g = input_grad(self, 0)) {
        mmap(*g, 0, rows, din).noalias() += dy * cmap(self.inputs[1]->value, 0, din, dout).transpose();
      }
      if (auto* g = input_grad(self, 1)) {
        mmap(*g, 0, din, dout).noalias() += cmap(self.inputs[0]->value, 0, rows, din).transpose() * dy;
      }
      if (auto* g = input_grad(self, 2)) {
        mmap(*g, 0, 1, dout) += dy.colwise().sum();
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  require_rank(a, 3, "bmm", "lhs");
  require_rank(b, 3, "bmm", "rhs");
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  require(b.dim(0) == batch && bk == k,
          "bmm: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  auto out = new_node({batch, m, n}, "bmm", {&a, &b});
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < batch; ++i) {
    auto y = mmap(out->value, i * m * n, m, n);
    auto lhs = cmap(av, i * m * k, m, k);
    if (transpose_b) {
      y.noalias() = lhs * cmap(bv, i * n * k, n, k).transpose();
    } else {
      y.noalias() = lhs * cmap(bv, i * k * n, k, n);
    }
  }
  if (out->requires_grad) {
    out->backward = [batch, m, k, n, transpose_b](Node& self) {
      const auto& av = self.inputs[0]->value;
      const auto& bv = self.inputs[1]->value;
      auto* ga = input_grad(self, 0);
      auto* gb = input_grad(self, 1);
      for (std::size_t i = 0; i < batch; ++i) {
        auto dy = cmap(self.grad, i * m * n, m, n);
        if (transpose_b) {
          if (ga) mmap(*ga, i * m * k, m, k).noalias() += dy * cmap(bv, i * n * k, n, k);
          if (gb) mmap(*gb, i * n * k, n, k).noalias() += dy.transpose() * cmap(av, i * m * k, m, k);
        } else {
          if (ga) mmap(*ga, i * m * k, m, k).noalias() += dy * cmap(bv, i * k * n, k, n).transpose();
          if (gb) mmap(*gb, i * k * n, k, n).noalias() += cmap(av, i * m * k, m, k).transpose() * dy;
        }
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor conv1d_same(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  constexpr std::size_t kWidth = 3;
  require_rank(x, 3, "conv1d_same", "input");
  require_rank(kernel, 3, "conv1d_same", "kernel");
  require_rank(bias, 1, "conv1d_same", "bias");
  require(kernel.dim(2) == kWidth, "conv1d_same: kernel size must be 3, got " + to_string(kernel.shape()));
  require(kernel.dim(1) == x.dim(1) && kernel.dim(0) == bias.dim(0),
          "conv1d_same: channel mismatch, input " + to_string(x.shape()) + " kernel " +
              to_string(kernel.shape()) + " bias " + to_string(bias.shape()));
  const std::size_t batch = x.dim(0), cin = x.dim(1), steps = x.dim(2), cout = kernel.dim(0);
  const std::size_t patch = cin * kWidth;
  auto out = new_node({batch, cout, steps}, "conv1d_same", {&x, &kernel, &bias});

  // cols[n] is the [cin*3, T] unfolded input of sample n.
  auto cols = std::make_shared<std::vector<double>>(batch * patch * steps, 0.0);
  const auto& xv = x.node()->value;
  const auto& kv = kernel.node()->value;
  const auto& bv = bias.node()->value;
  parallel_for(batch, [&](std::size_t n) {
    double* c = cols->data() + n * patch * steps;
    for (std::size_t ch = 0; ch < cin; ++ch) {
      const double* row = xv.data() + (n * cin + ch) * steps;
      for (std::size_t k = 0; k < kWidth; ++k) {
        double* dst = c + (ch * kWidth + k) * steps;
        for (std::size_t t = 0; t < steps; ++t) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - 1;
          dst[t] = (src >= 0 && src < static_cast<std::ptrdiff_t>(steps)) ? row[src] : 0.0;
        }
      }
    }
    auto y = mmap(out->value, n * cout * steps, cout, steps);
    y.noalias() = cmap(kv, 0, cout, patch) * cmap(*cols, n * patch * steps, patch, steps);
    y.colwise() += Eigen::Map<const Eigen::VectorXd>(bv.data(), static_cast<Eigen::Index>(cout));
  });

  if (out->requires_grad) {
    out->backward = [cols, batch, cin, steps, cout, patch](Node& self) {
      auto* gx = input_grad(self, 0);
      auto* gk = input_grad(self, 1);
      auto* gb = input_grad(self, 2);
      const auto& kv = self.inputs[1]->value;
      // Per-sample kernel gradients, reduced in sample order afterwards.
      std::vector<double> partial(gk ? batch * cout * patch : 0, 0.0);
      parallel_for(batch, [&](std::size_t n) {
        auto dy = cmap(self.grad, n * cout * steps, cout, steps);
        if (gk) {
          mmap(partial, n * cout * patch, cout, patch).noalias() =
              dy * cmap(*cols, n * patch * steps, patch, steps).transpose();
        }
        if (gx) {
          RowMat dcols = cmap(kv, 0, cout, patch).transpose() * dy;
          for (std::size_t ch = 0; ch < cin; ++ch) {
            double* row = gx->data() + (n * cin + ch) * steps;
            for (std::size_t k = 0; k < kWidth; ++k) {
              for (std::size_t t = 0; t < steps; ++t) {
                const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - 1;
                if (src >= 0 && src < static_cast<std::ptrdiff_t>(steps)) {
                  row[src] += dcols(static_cast<Eigen::Index>(ch * kWidth + k), static_cast<Eigen::Index>(t));
                }
              }
            }
          }
        }
      });
      if (gk) {
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t i = 0; i < cout * patch; ++i) (*gk)[i] += partial[n * cout * patch + i];
        }
      }
      if (gb) {
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t c = 0; c < cout; ++c) {
            const double* dy = self.grad.data() + (n * cout + c) * steps;
            double s = 0.0;
            for (std::size_t t = 0; t < steps; ++t) s += dy[t];
            (*gb)[c] += s;
          }
        }
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor batchnorm1d(const Tensor& x, const Tensor& gamma, const Tensor& beta, NormMode mode,
                   RunningStats& stats) {
  require_rank(x, 3, "batchnorm1d", "input");
  require_rank(gamma, 1, "batchnorm1d", "gamma");
  require_rank(beta, 1, "batchnorm1d", "beta");
  const std::size_t batch = x.dim(0), channels = x.dim(1), steps = x.dim(2);
  require(gamma.dim(0) == channels && beta.dim(0) == channels,
          "batchnorm1d: channel mismatch, input " + to_string(x.shape()) + " gamma " + to_string(gamma.shape()));
  const std::size_t count = batch * steps;
  const auto& xv = x.node()->value;

  std::vector<double> mean(channels), invstd(channels);
  if (mode == NormMode::kTrain) {
    if (count < 2) throw DimensionError("batchnorm1d: train mode needs at least 2 values per channel");
    if (!stats.initialized) {
      stats.mean.assign(channels, 0.0);
      stats.var.assign(channels, 1.0);
      stats.initialized = true;
    }
    if (stats.mean.size() != channels) throw DimensionError("batchnorm1d: running statistics have wrong size");
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const double* row = xv.data() + (n * channels + c) * steps;
        for (std::size_t t = 0; t < steps; ++t) s += row[t];
      }
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const double* row = xv.data() + (n * channels + c) * steps;
        for (std::size_t t = 0; t < steps; ++t) ss += (row[t] - mu) * (row[t] - mu);
      }
      const double var = ss / static_cast<double>(count);
      mean[c] = mu;
      invstd[c] = 1.0 / std::sqrt(var + kNormEpsilon);
      const double unbiased = ss / static_cast<double>(count - 1);
      stats.mean[c] = (1.0 - stats.momentum) * stats.mean[c] + stats.momentum * mu;
      stats.var[c] = (1.0 - stats.momentum) * stats.var[c] + stats.momentum * unbiased;
    }
  } else {
    if (!stats.initialized) {
      throw std::logic_error("batchnorm1d: eval mode requires initialized running statistics");
    }
    if (stats.mean.size() != channels) throw DimensionError("batchnorm1d: running statistics have wrong size");
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = stats.mean[c];
      invstd[c] = 1.0 / std::sqrt(stats.var[c] + kNormEpsilon);
    }
  }

  auto out = new_node(x.shape(), "batchnorm1d", {&x, &gamma, &beta});
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  const auto& g = gamma.node()->value;
  const auto& b = beta.node()->value;
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (n * channels + c) * steps;
      for (std::size_t t = 0; t < steps; ++t) {
        const double h = (xv[base + t] - mean[c]) * invstd[c];
        (*xhat)[base + t] = h;
        out->value[base + t] = g[c] * h + b[c];
      }
    }
  }
  if (out->requires_grad) {
    const bool train = mode == NormMode::kTrain;
    out->backward = [xhat, invstd, train, batch, channels, steps, count](Node& self) {
      const auto& gv = self.inputs[1]->value;
      auto* gx = input_grad(self, 0);
      auto* gg = input_grad(self, 1);
      auto* gb = input_grad(self, 2);
      for (std::size_t c = 0; c < channels; ++c) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t n = 0; n < batch; ++n) {
          const std::size_t base = (n * channels + c) * steps;
          for (std::size_t t = 0; t < steps; ++t) {
            sum_dy += self.grad[base + t];
            sum_dy_xhat += self.grad[base + t] * (*xhat)[base + t];
          }
        }
        if (gg) (*gg)[c] += sum_dy_xhat;
        if (gb) (*gb)[c] += sum_dy;
        if (!gx) continue;
        const double m = static_cast<double>(count);
        for (std::size_t n = 0; n < batch; ++n) {
          const std::size_t base = (n * channels + c) * steps;
          for (std::size_t t = 0; t < steps; ++t) {
            const double dxhat = self.grad[base + t] * gv[c];
            if (train) {
              (*gx)[base + t] += invstd[c] / m *
                                 (m * dxhat - gv[c] * sum_dy - (*xhat)[base + t] * gv[c] * sum_dy_xhat);
            } else {
              (*gx)[base + t] += dxhat * invstd[c];
            }
          }
        }
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  require_rank(x, 2, "layer_norm", "input");
  require_rank(gamma, 1, "layer_norm", "gamma");
  require_rank(beta, 1, "layer_norm", "beta");
  const std::size_t rows = x.dim(0), width = x.dim(1);
  require(gamma.dim(0) == width && beta.dim(0) == width,
          "layer_norm: width mismatch, input " + to_string(x.shape()) + " gamma " + to_string(gamma.shape()));
  auto out = new_node(x.shape(), "layer_norm", {&x, &gamma, &beta});
  const auto& xv = x.node()->value;
  const auto& g = gamma.node()->value;
  const auto& b = beta.node()->value;
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto invstd = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * width;
    double mu = 0.0;
    for (std::size_t i = 0; i < width; ++i) mu += row[i];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t i = 0; i < width; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(width);
    const double is = 1.0 / std::sqrt(var + kNormEpsilon);
    (*invstd)[r] = is;
    for (std::size_t i = 0; i < width; ++i) {
      const double h = (row[i] - mu) * is;
      (*xhat)[r * width + i] = h;
      out->value[r * width + i] = g[i] * h + b[i];
    }
  }
  if (out->requires_grad) {
    out->backward = [xhat, invstd, rows, width](Node& self) {
      const auto& gv = self.inputs[1]->value;
      auto* gx = input_grad(self, 0);
      auto* gg = input_grad(self, 1);
      auto* gb = input_grad(self, 2);
      const double m = static_cast<double>(width);
      std::vector<double> dxhat(width);
      for (std::size_t r = 0; r < rows; ++r) {
        double sum_d = 0.0, sum_dh = 0.0;
        for (std::size_t i = 0; i < width; ++i) {
          const double dy = self.grad[r * width + i];
          const double h = (*xhat)[r * width + i];
          if (gg) (*gg)[i] += dy * h;
          if (gb) (*gb)[i] += dy;
          dxhat[i] = dy * gv[i];
          sum_d += dxhat[i];
          sum_dh += dxhat[i] * h;
        }
        if (!gx) continue;
        for (std::size_t i = 0; i < width; ++i) {
          (*gx)[r * width + i] +=
              (*invstd)[r] / m * (m * dxhat[i] - sum_d - (*xhat)[r * width + i] * sum_dh);
        }
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor softmax_lastdim(const Tensor& x) {
  require_defined(x, "softmax_lastdim");
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.numel() / width;
  auto out = new_node(x.shape(), "softmax", {&x});
  const auto& xv = x.node()->value;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * width;
    double* y = out->value.data() + r * width;
    const double mx = *std::max_element(in, in + width);
    double s = 0.0;
    for (std::size_t i = 0; i < width; ++i) {
      y[i] = std::exp(in[i] - mx);
      s += y[i];
    }
    for (std::size_t i = 0; i < width; ++i) y[i] /= s;
  }
  if (out->requires_grad) {
    out->backward = [rows, width](Node& self) {
      auto& g = *input_grad(self, 0);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = self.value.data() + r * width;
        const double* dy = self.grad.data() + r * width;
        double dot = 0.0;
        for (std::size_t i = 0; i < width; ++i) dot += dy[i] * y[i];
        for (std::size_t i = 0; i < width; ++i) g[r * width + i] += y[i] * (dy[i] - dot);
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor cosine_gram(const Tensor& f) {
  constexpr double kEps = 1e-12;
  require_rank(f, 3, "cosine_gram", "input");
  const std::size_t batch = f.dim(0), steps = f.dim(1), width = f.dim(2);
  auto out = new_node({batch, steps, steps}, "cosine_gram", {&f});
  const auto& fv = f.node()->value;
  auto norms = std::make_shared<std::vector<double>>(batch * steps);
  for (std::size_t i = 0; i < batch * steps; ++i) {
    double s = 0.0;
    for (std::size_t d = 0; d < width; ++d) s += fv[i * width + d] * fv[i * width + d];
    (*norms)[i] = std::sqrt(s);
  }
  for (std::size_t b = 0; b < batch; ++b) {
    auto rows = cmap(fv, b * steps * width, steps, width);
    RowMat gram = rows * rows.transpose();
    for (std::size_t i = 0; i < steps; ++i) {
      for (std::size_t j = 0; j < steps; ++j) {
        const double ri = (*norms)[b * steps + i], rj = (*norms)[b * steps + j];
        double s = 0.0;
        if (ri >= kEps && rj >= kEps) s = gram(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) / (ri * rj + kEps);
        out->value[(b * steps + i) * steps + j] = s;
      }
    }
  }
  if (out->requires_grad) {
    out->backward = [norms, batch, steps, width](Node& self) {
      auto& g = *input_grad(self, 0);
      const auto& fv = self.inputs[0]->value;
      for (std::size_t b = 0; b < batch; ++b) {
        // dF_i = sum_j W_ij f_j - (sum_j W_ij s_ij r_j / r_i) f_i, with W_ij = (G_ij + G_ji) / q_ij.
        RowMat w = RowMat::Zero(static_cast<Eigen::Index>(steps), static_cast<Eigen::Index>(steps));
        std::vector<double> diag(steps, 0.0);
        for (std::size_t i = 0; i < steps; ++i) {
          const double ri = (*norms)[b * steps + i];
          if (ri < kEps) continue;
          for (std::size_t j = 0; j < steps; ++j) {
            const double rj = (*norms)[b * steps + j];
            if (rj < kEps) continue;
            const double q = ri * rj + kEps;
            const double gsum = self.grad[(b * steps + i) * steps + j] + self.grad[(b * steps + j) * steps + i];
            const double wij = gsum / q;
            w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = wij;
            diag[i] += wij * self.value[(b * steps + i) * steps + j] * rj / ri;
          }
        }
        auto rows = cmap(fv, b * steps * width, steps, width);
        auto dst = mmap(g, b * steps * width, steps, width);
        dst.noalias() += w * rows;
        for (std::size_t i = 0; i < steps; ++i) {
          dst.row(static_cast<Eigen::Index>(i)) -= diag[i] * rows.row(static_cast<Eigen::Index>(i));
        }
      }
    };
  }
  return Tensor::wrap(out);
}

// ---- shape ----------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  require(shape_numel(shape) == x.numel(), "reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  auto out = new_node(std::move(shape), "reshape", {&x});
  out->value = x.node()->value;
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      auto& g = *input_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    };
  }
  return Tensor::wrap(out);
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  require_defined(x, "permute");
  const Shape& in = x.shape();
  const std::size_t rank = in.size();
  std::vector<bool> used(rank, false);
  require(axes.size() == rank, "permute: axis count does not match rank of " + to_string(in));
  for (std::size_t a : axes) {
    require(a < rank && !used[a], "permute: invalid axis list for " + to_string(in));
    used[a] = true;
  }
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out_shape(rank);
  std::vector<std::size_t> src_stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in[axes[i]];
    src_stride[i] = in_strides[axes[i]];
  }
  // map[o] is the flat input index feeding flat output index o.
  auto map = std::make_shared<std::vector<std::size_t>>(x.numel());
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < map->size(); ++o) {
    (*map)[o] = src;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      src += src_stride[d];
      if (idx[d] < out_shape[d]) break;
      src -= src_stride[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  auto out = new_node(std::move(out_shape), "permute", {&x});
  const auto& xv = x.node()->value;
  for (std::size_t o = 0; o < map->size(); ++o) out->value[o] = xv[(*map)[o]];
  if (out->requires_grad) {
    out->backward = [map](Node& self) {
      auto& g = *input_grad(self, 0);
      for (std::size_t o = 0; o < map->size(); ++o) g[(*map)[o]] += self.grad[o];
    };
  }
  return Tensor::wrap(out);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  for (const auto& p : parts) require_defined(p, "concat");
  const Shape& first = parts.front().shape();
  require(axis < first.size(), "concat: axis out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    require(ok, "concat: incompatible shapes " + to_string(first) + " and " + to_string(s));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];

  auto out = std::make_shared<Node>();
  out->value.assign(shape_numel(out_shape), 0.0);
  out->shape = out_shape;
  out->op = "concat";
  for (const auto& p : parts) out->requires_grad = out->requires_grad || (g_grad_enabled && p.requires_grad());
  if (out->requires_grad) {
    for (const auto& p : parts) out->inputs.push_back(p.node());
  }
  std::vector<std::size_t> chunk(parts.size());
  for (std::size_t k = 0; k < parts.size(); ++k) chunk[k] = parts[k].shape()[axis] * inner;
  const std::size_t out_chunk = out_shape[axis] * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t offset = o * out_chunk;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const auto& v = parts[k].node()->value;
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * chunk[k]), chunk[k],
                  out->value.begin() + static_cast<std::ptrdiff_t>(offset));
      offset += chunk[k];
    }
  }
  if (out->requires_grad) {
    out->backward = [chunk, out_chunk, outer](Node& self) {
      for (std::size_t o = 0; o < outer; ++o) {
        std::size_t offset = o * out_chunk;
        for (std::size_t k = 0; k < chunk.size(); ++k) {
          if (auto* g = input_grad(self, k)) {
            for (std::size_t i = 0; i < chunk[k]; ++i) (*g)[o * chunk[k] + i] += self.grad[offset + i];
          }
          offset += chunk[k];
        }
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_rank(x, 2, "gather_rows", "input");
  const std::size_t width = x.dim(1);
  for (std::size_t r : rows) require(r < x.dim(0), "gather_rows: row index out of range for " + to_string(x.shape()));
  require(!rows.empty(), "gather_rows: empty index list");
  auto out = new_node({rows.size(), width}, "gather_rows", {&x});
  const auto& xv = x.node()->value;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(rows[i] * width), width,
                out->value.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  if (out->requires_grad) {
    out->backward = [index = std::vector<std::size_t>(rows.begin(), rows.end()), width](Node& self) {
      auto& g = *input_grad(self, 0);
      for (std::size_t i = 0; i < index.size(); ++i) {
        for (std::size_t c = 0; c < width; ++c) g[index[i] * width + c] += self.grad[i * width + c];
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor row_scale(const Tensor& x, const Tensor& s) {
  require_rank(x, 2, "row_scale", "input");
  require_defined(s, "row_scale");
  const std::size_t rows = x.dim(0), width = x.dim(1);
  require(s.numel() == rows, "row_scale: need one factor per row of " + to_string(x.shape()) + ", got " + to_string(s.shape()));
  auto out = new_node(x.shape(), "row_scale", {&x, &s});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < width; ++c) out->value[r * width + c] = x[r * width + c] * s[r];
  }
  if (out->requires_grad) {
    out->backward = [rows, width](Node& self) {
      const auto& xv = self.inputs[0]->value;
      const auto& sv = self.inputs[1]->value;
      auto* gx = input_grad(self, 0);
      auto* gs = input_grad(self, 1);
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < width; ++c) {
          const double dy = self.grad[r * width + c];
          if (gx) (*gx)[r * width + c] += dy * sv[r];
          acc += dy * xv[r * width + c];
        }
        if (gs) (*gs)[r] += acc;
      }
    };
  }
  return Tensor::wrap(out);
}

// ---- reductions --------------------------------------------------------------------

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  auto out = new_node({1}, "sum", {&x});
  double s = 0.0;
  for (double v : x.data()) s += v;
  out->value[0] = s;
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      auto& g = *input_grad(self, 0);
      for (double& v : g) v += self.grad[0];
    };
  }
  return Tensor::wrap(out);
}

Tensor dot_const(const Tensor& x, std::span<const double> weights) {
  require_defined(x, "dot_const");
  require(weights.size() == x.numel(), "dot_const: weight count does not match " + to_string(x.shape()));
  auto out = new_node({1}, "dot_const", {&x});
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += x[i] * weights[i];
  out->value[0] = s;
  if (out->requires_grad) {
    out->backward = [w = std::vector<double>(weights.begin(), weights.end())](Node& self) {
      auto& g = *input_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * w[i];
    };
  }
  return Tensor::wrap(out);
}

Tensor weighted_segment_sum(const Tensor& x, std::span<const double> weights, std::size_t segments) {
  require_defined(x, "weighted_segment_sum");
  require(segments > 0 && x.numel() % segments == 0 && weights.size() == x.numel(),
          "weighted_segment_sum: " + std::to_string(segments) + " segments do not tile " + to_string(x.shape()));
  const std::size_t len = x.numel() / segments;
  auto out = new_node({segments}, "weighted_segment_sum", {&x});
  for (std::size_t e = 0; e < segments; ++e) {
    double s = 0.0;
    for (std::size_t l = 0; l < len; ++l) s += weights[e * len + l] * x[e * len + l];
    out->value[e] = s;
  }
  if (out->requires_grad) {
    out->backward = [w = std::vector<double>(weights.begin(), weights.end()), len](Node& self) {
      auto& g = *input_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i / len] * w[i];
    };
  }
  return Tensor::wrap(out);
}

// ---- optimization ----------------------------------------------------------------

double SgdConfig::rate_at(int epoch) const {
  double rate = learning_rate;
  for (const auto& [from, factor] : schedule) {
    if (epoch >= from) rate *= factor;
  }
  return rate;
}

void SgdConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  for (const auto& [from, factor] : schedule) {
    if (!(factor > 0.0)) {
      throw std::invalid_argument("schedule factor at epoch " + std::to_string(from) + " must be positive");
    }
  }
}

void sgd_step(std::span<NamedParam> params, const SgdConfig& config, int epoch) {
  const double rate = config.rate_at(epoch);
  for (auto& p : params) {
    if (!p.tensor.has_grad()) throw std::logic_error("sgd_step: parameter '" + p.name + "' has no gradient");
  }
  for (auto& p : params) {
    auto value = p.tensor.mutable_data();
    auto grad = p.tensor.grad();
    for (std::size_t i = 0; i < value.size(); ++i) value[i] -= rate * grad[i];
    p.tensor.zero_grad();
  }
}

double grad_check(const std::function<Tensor()>& fn, std::span<Tensor> point, double step) {
  constexpr double kRoundoffUlps = 16.0;
  for (auto& t : point) t.zero_grad();
  backward(fn());
  std::vector<std::vector<double>> analytic;
  analytic.reserve(point.size());
  for (const auto& t : point) {
    auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(t.numel(), 0.0);
  }
  double worst = 0.0;
  for (std::size_t k = 0; k < point.size(); ++k) {
    auto values = point[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + step;
      const double up = fn().item();
      values[i] = original - step;
      const double down = fn().item();
      values[i] = original;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[k][i];
      // differences below the rounding noise of up - down are not measurable
      const double noise = kRoundoffUlps * std::numeric_limits<double>::epsilon() *
                           (std::fabs(up) + std::fabs(down)) / (2.0 * step);
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      worst = std::max(worst, std::max(0.0, std::fabs(a - numeric) - noise) / denom);
    }
  }
  for (auto& t : point) t.zero_grad();
  return worst;
}

}  // namespace grouptr::nn
