#pragma once

// Dense double-precision tensors with tape-free reverse-mode differentiation.
//
// Every op returns a fresh Tensor. When gradient recording is enabled and at
// least one input requires a gradient, the result keeps its inputs alive and
// a closure that pushes its gradient back into them. Calling backward() on a
// scalar walks that graph in reverse topological order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace castformer {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng,
                        bool requires_grad = false);
  static Tensor normal(Shape shape, double stddev, Rng& rng,
                       bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;

  std::span<const double> data() const;
  // Direct write access; only meaningful on leaves (parameters, inputs).
  std::span<double> mutable_data();
  std::vector<double> to_vector() const;

  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  // Empty span until a backward pass has touched this tensor.
  std::span<const double> grad() const;
  void zero_grad();

  // Reverse pass from a single-element tensor.
  void backward() const;

  // Same values, no history, no gradient.
  Tensor detach() const;
  Tensor clone(bool requires_grad = false) const;

  const char* op_name() const;
  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Gradient recording switch, per thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Test hook: scales the gradient flowing out of every node whose op name
// matches. Used as a negative control for the gradient checker.
class BackwardFaultGuard {
 public:
  BackwardFaultGuard(std::string op, double factor);
  ~BackwardFaultGuard();
  BackwardFaultGuard(const BackwardFaultGuard&) = delete;
  BackwardFaultGuard& operator=(const BackwardFaultGuard&) = delete;
};

// ---- elementwise (numpy-style trailing broadcast) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor broadcast_to(const Tensor& x, const Shape& shape);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// ---- reductions ----
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mean_axis(const Tensor& x, std::size_t axis);

// ---- shape manipulation ----
Tensor reshape(const Tensor& x, Shape shape);
Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start,
              std::size_t length);
Tensor select(const Tensor& x, std::size_t axis, std::size_t index);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
// Zero-filled one-step delay along axis 1 of a (B,T,D) tensor:
// out[b,0] = 0, out[b,t] = x[b,t-1].
Tensor delay_shift(const Tensor& x);

// ---- layers ----
// Stable exp-normalize over the trailing axis.
Tensor softmax(const Tensor& logits);
std::vector<double> softmax(std::span<const double> logits);

// y = x W^T + b over the trailing axis. W is (d_out, d_in); b may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

// y = x * s / sqrt(mean(x^2) + eps) over the trailing axis; s is (1) or (D).
Tensor rms_norm(const Tensor& x, const Tensor& scale, double eps = 1e-6);

enum class Mode { Train, Eval };

// Inverted dropout. Identity (same node) in eval mode or with rate 0.
Tensor dropout(const Tensor& x, double rate, Mode mode, Rng* rng);

// Row-wise projection removal: delta - <delta,b>/(|b|^2+eps) * b.
// base is (D) shared by all rows or (B,D) per row.
Tensor orthogonalize(const Tensor& delta, const Tensor& base, double eps);

// Mean over the batch of -log softmax(logits)[label]. Optional per-class
// weights turn it into a weighted mean.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels,
                     std::span<const double> class_weights = {});

// Boolean (Lq, Lk) matrix, row-major; true means the key is visible.
struct AttentionMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allowed;

  static AttentionMask full(std::size_t rows, std::size_t cols);
  // Query i sees keys j <= i + offset.
  static AttentionMask lower(std::size_t rows, std::size_t cols,
                             std::ptrdiff_t offset = 0);
  bool operator()(std::size_t i, std::size_t j) const {
    return allowed[i * cols + j] != 0;
  }
};

struct AttentionResult {
  Tensor output;   // (B, Lq, D)
  Tensor weights;  // (B, H, Lq, Lk), detached
};

// Head-split scaled dot-product attention on already-projected inputs:
// per head h, softmax(Q_h K_h^T / sqrt(D/H)) V_h, heads concatenated.
AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k,
                                     const Tensor& v, std::size_t heads,
                                     const AttentionMask* mask = nullptr);

}  // namespace castformer
