#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace grouptr::nn {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

// One vertex of the autodiff graph. `backward` reads `grad` and accumulates
// into the grads of `inputs`.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad();
};

}  // namespace detail

/// Handle to a dense row-major float64 array that may carry a gradient.
/// Copies share the same underlying storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writable view; only leaves may be written (parameters, inputs).
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Value copy with no history.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Topologically ordered record of the operations that produced a tensor.
class Tape {
 public:
  static Tape record(const Tensor& root);

  std::size_t size() const { return order_.size(); }
  const std::vector<detail::Node*>& nodes() const { return order_; }

  // Seeds d(root)/d(root) = 1 and runs every backward rule once in reverse order.
  void run_backward();

 private:
  std::vector<detail::Node*> order_;
  std::shared_ptr<detail::Node> root_;
};

/// While alive, ops on this thread record no history (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Populates gradients of every requires_grad leaf reachable from `loss`.
/// Leaf gradients accumulate across calls; intermediate ones are recomputed.
void backward(const Tensor& loss);

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor abs(const Tensor& a);

enum class Pointwise { kRelu, kSigmoid, kLogSigmoid };
Tensor pointwise(const Tensor& x, Pointwise fn);
inline Tensor relu(const Tensor& x) { return pointwise(x, Pointwise::kRelu); }
inline Tensor sigmoid(const Tensor& x) { return pointwise(x, Pointwise::kSigmoid); }
inline Tensor log_sigmoid(const Tensor& x) { return pointwise(x, Pointwise::kLogSigmoid); }

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// x[B,Din] * W[Din,Dout] + b[Dout]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
// Batched a[B,M,K] * b[B,K,N], or a * b^T when b is [B,N,K] and transpose_b.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

// x[N,Cin,T] with kernel[Cout,Cin,3]; zero padding keeps T.
Tensor conv1d_same(const Tensor& x, const Tensor& kernel, const Tensor& bias);

enum class NormMode { kTrain, kEval };

struct RunningStats {
  std::vector<double> mean;
  std::vector<double> var;
  bool initialized = false;
  double momentum = 0.1;
};

inline constexpr double kNormEpsilon = 1e-5;

// Per-channel normalization of x[N,C,T] over (N,T).
Tensor batchnorm1d(const Tensor& x, const Tensor& gamma, const Tensor& beta, NormMode mode,
                   RunningStats& stats);
// Per-row normalization of x[R,D] over D.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta);

Tensor softmax_lastdim(const Tensor& x);

// s[b,i,j] = <f_i, f_j> / (|f_i| |f_j| + eps) over rows of f[B,T,D]; rows with
// norm below eps give zero similarity.
Tensor cosine_gram(const Tensor& f);

// ---- shape ------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
// x[R,C] with row r multiplied by s[r].
Tensor row_scale(const Tensor& x, const Tensor& s);

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& x);
// sum_i x[i] * w[i] with constant weights.
Tensor dot_const(const Tensor& x, std::span<const double> weights);
// out[e] = sum_l w[e*L + l] * x[e*L + l] for flat x of length segments * L.
Tensor weighted_segment_sum(const Tensor& x, std::span<const double> weights,
                            std::size_t segments);

// ---- optimization ------------------------------------------------------------

struct SgdConfig {
  double learning_rate = 0.1;
  // (epoch, factor): from that epoch on the rate is multiplied by factor.
  std::vector<std::pair<int, double>> schedule;

  double rate_at(int epoch) const;
  void validate() const;
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

void sgd_step(std::span<NamedParam> params, const SgdConfig& config, int epoch);

/// Max relative error between the analytic gradient of `fn` and central
/// differences, over every element of every tensor in `point`. Absolute
/// differences within 16 ulps of rounding noise in f(x+h) - f(x-h) count as 0.
double grad_check(const std::function<Tensor()>& fn, std::span<Tensor> point,
                  double step = 1e-5);

}  // namespace grouptr::nn
