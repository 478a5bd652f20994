#include "castformer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "castformer/errors.hpp"

namespace castformer {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::string g_fault_op;
thread_local double g_fault_factor = 1.0;

using detail::Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node&)>;

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

// Builds the result node and wires the backward closure if any input needs it.
Tensor make_result(Shape shape, std::vector<double> value, const char* op,
                   std::initializer_list<const Tensor*> inputs,
                   BackwardFn backward) {
  check_finite(value, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (g_grad_enabled) {
    for (const Tensor* t : inputs) {
      if (t->defined() && t->requires_grad()) needs = true;
    }
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) {
      if (t->defined()) node->parents.push_back(t->node());
    }
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

// Gradient buffer of an input, or nullptr when it does not need one.
std::vector<double>* grad_of(const NodePtr& n) {
  if (!n || !n->requires_grad) return nullptr;
  return &n->ensure_grad();
}

NodePtr node_of(const Tensor& t) { return t.node(); }

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
}

// Flat index maps for broadcasting a and b to a common output shape.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> ia;
  std::vector<std::size_t> ib;
};

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) +
                       " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

std::vector<std::size_t> index_map(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> strides(r, 0);
  std::size_t s = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i = in.size() - 1 - k;
    const std::size_t o = r - 1 - k;
    strides[o] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  const std::size_t n = numel(out);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t f = 0; f < n; ++f) {
    map[f] = off;
    for (std::size_t k = r; k-- > 0;) {
      ++idx[k];
      off += strides[k];
      if (idx[k] < out[k]) break;
      off -= strides[k] * idx[k];
      idx[k] = 0;
    }
  }
  return map;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast p;
  p.out = broadcast_shape(a, b, op);
  p.ia = index_map(a, p.out);
  p.ib = index_map(b, p.out);
  return p;
}

enum class BinOp { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp kind, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  const auto& av = a.data();
  const auto& bv = b.data();
  if (a.shape() == b.shape()) {
    const std::size_t n = a.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = kind == BinOp::Add   ? av[i] + bv[i]
               : kind == BinOp::Sub ? av[i] - bv[i]
                                    : av[i] * bv[i];
    }
    NodePtr na = node_of(a), nb = node_of(b);
    return make_result(a.shape(), std::move(out), op, {&a, &b},
                       [na, nb, kind](Node& self) {
                         const auto& g = self.grad;
                         if (auto* ga = grad_of(na)) {
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             (*ga)[i] += kind == BinOp::Mul ? g[i] * nb->value[i] : g[i];
                           }
                         }
                         if (auto* gb = grad_of(nb)) {
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             (*gb)[i] += kind == BinOp::Add   ? g[i]
                                         : kind == BinOp::Sub ? -g[i]
                                                              : g[i] * na->value[i];
                           }
                         }
                       });
  }
  auto plan = std::make_shared<Broadcast>(plan_broadcast(a.shape(), b.shape(), op));
  const std::size_t n = numel(plan->out);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[plan->ia[i]];
    const double y = bv[plan->ib[i]];
    out[i] = kind == BinOp::Add ? x + y : kind == BinOp::Sub ? x - y : x * y;
  }
  NodePtr na = node_of(a), nb = node_of(b);
  return make_result(plan->out, std::move(out), op, {&a, &b},
                     [na, nb, kind, plan](Node& self) {
                       const auto& g = self.grad;
                       if (auto* ga = grad_of(na)) {
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           (*ga)[plan->ia[i]] +=
                               kind == BinOp::Mul ? g[i] * nb->value[plan->ib[i]] : g[i];
                         }
                       }
                       if (auto* gb = grad_of(nb)) {
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           (*gb)[plan->ib[i]] +=
                               kind == BinOp::Add   ? g[i]
                               : kind == BinOp::Sub ? -g[i]
                                                    : g[i] * na->value[plan->ia[i]];
                         }
                       }
                     });
}

}  // namespace

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  const std::size_t n = numel(shape);
  return from(std::move(shape), std::vector<double>(n, v), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: shape " + shape_str(shape) + " needs " +
                     std::to_string(numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  check_finite(values, "Tensor::from");
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from({1}, {v}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng,
                       bool requires_grad) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return from(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::normal(Shape shape, double stddev, Rng& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return from(std::move(shape), std::move(v), requires_grad);
}

const Shape& Tensor::shape() const {
  if (!node_) throw ShapeError("undefined tensor has no shape");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::size() const { return node_ ? node_->value.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!node_) return {};
  return node_->value;
}

std::span<double> Tensor::mutable_data() {
  if (!node_) return {};
  return node_->value;
}

std::vector<double> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

double Tensor::item() const {
  if (size() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("at(): rank mismatch");
  std::size_t off = 0;
  std::size_t k = 0;
  for (std::size_t i : index) {
    if (i >= s[k]) throw ShapeError("at(): index out of range");
    off = off * s[k] + i;
    ++k;
  }
  return node_->value[off];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (node_) node_->requires_grad = on;
}

std::span<const double> Tensor::grad() const {
  if (!node_) return {};
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

const char* Tensor::op_name() const { return node_ ? node_->op : "undefined"; }

void Tensor::backward() const {
  if (size() != 1) {
    throw ShapeError("backward() needs a single-element tensor, got " +
                     shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward || n->grad.empty()) continue;
    if (!g_fault_op.empty() && g_fault_op == n->op) {
      for (auto& g : n->grad) g *= g_fault_factor;
    }
    n->backward(*n);
  }
}

Tensor Tensor::detach() const {
  require_defined(*this, "detach");
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->value = node_->value;
  return Tensor(std::move(node));
}

Tensor Tensor::clone(bool requires_grad) const {
  Tensor t = detach();
  t.set_requires_grad(requires_grad);
  return t;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

BackwardFaultGuard::BackwardFaultGuard(std::string op, double factor) {
  g_fault_op = std::move(op);
  g_fault_factor = factor;
}

BackwardFaultGuard::~BackwardFaultGuard() {
  g_fault_op.clear();
  g_fault_factor = 1.0;
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul, "mul"); }

Tensor scale(const Tensor& x, double c) {
  require_defined(x, "scale");
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= c;
  NodePtr nx = node_of(x);
  return make_result(x.shape(), std::move(out), "scale", {&x}, [nx, c](Node& self) {
    auto* g = grad_of(nx);
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += c * self.grad[i];
  });
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  require_defined(x, "broadcast_to");
  if (broadcast_shape(x.shape(), shape, "broadcast_to") != shape) {
    throw ShapeError("broadcast_to: " + shape_str(x.shape()) + " does not expand to " +
                     shape_str(shape));
  }
  auto map = std::make_shared<std::vector<std::size_t>>(index_map(x.shape(), shape));
  std::vector<double> out(map->size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[(*map)[i]];
  NodePtr nx = node_of(x);
  return make_result(shape, std::move(out), "broadcast_to", {&x}, [nx, map](Node& self) {
    auto* g = grad_of(nx);
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[(*map)[i]] += self.grad[i];
  });
}

Tensor relu(const Tensor& x) {
  require_defined(x, "relu");
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  NodePtr nx = node_of(x);
  return make_result(x.shape(), std::move(out), "relu", {&x}, [nx](Node& self) {
    auto* g = grad_of(nx);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (nx->value[i] > 0.0) (*g)[i] += self.grad[i];
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  require_defined(x, "sigmoid");
  std::vector<double> out(x.size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xv[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  NodePtr nx = node_of(x);
  return make_result(x.shape(), std::move(out), "sigmoid", {&x}, [nx](Node& self) {
    auto* g = grad_of(nx);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double s = self.value[i];
      (*g)[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double s = 0.0;
  for (double v : x.data()) s += v;
  NodePtr nx = node_of(x);
  return make_result({1}, {s}, "sum", {&x}, [nx](Node& self) {
    auto* g = grad_of(nx);
    for (auto& v : *g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  if (x.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor mean_axis(const Tensor& x, std::size_t axis) {
  require_defined(x, "mean_axis");
  const Shape& s = x.shape();
  if (axis >= s.size()) throw ShapeError("mean_axis: axis out of range");
  if (s[axis] == 0) throw ShapeError("mean_axis: empty axis");
  const std::size_t outer = numel(Shape(s.begin(), s.begin() + axis));
  const std::size_t len = s[axis];
  const std::size_t inner = numel(Shape(s.begin() + axis + 1, s.end()));
  Shape os = s;
  os.erase(os.begin() + axis);
  if (os.empty()) os = {1};
  std::vector<double> out(outer * inner, 0.0);
  const auto xv = x.data();
  const double w = 1.0 / static_cast<double>(len);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      const double* src = xv.data() + (o * len + l) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  for (auto& v : out) v *= w;
  NodePtr nx = node_of(x);
  return make_result(os, std::move(out), "mean_axis", {&x},
                     [nx, outer, len, inner, w](Node& self) {
                       auto* g = grad_of(nx);
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t l = 0; l < len; ++l) {
                           for (std::size_t i = 0; i < inner; ++i) {
                             (*g)[(o * len + l) * inner + i] += w * self.grad[o * inner + i];
                           }
                         }
                       }
                     });
}

// ---------------------------------------------------------------- shapes

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  NodePtr nx = node_of(x);
  return make_result(std::move(shape), x.to_vector(), "reshape", {&x}, [nx](Node& self) {
    auto* g = grad_of(nx);
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
  });
}

Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  require_defined(x, "narrow");
  const Shape& s = x.shape();
  if (axis >= s.size() || start + length > s[axis]) {
    throw ShapeError("narrow: [" + std::to_string(start) + ", +" + std::to_string(length) +
                     ") on axis " + std::to_string(axis) + " of " + shape_str(s));
  }
  const std::size_t outer = numel(Shape(s.begin(), s.begin() + axis));
  const std::size_t len = s[axis];
  const std::size_t inner = numel(Shape(s.begin() + axis + 1, s.end()));
  Shape os = s;
  os[axis] = length;
  std::vector<double> out(outer * length * inner);
  const auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.data() + (o * len + start) * inner, length * inner,
                out.data() + o * length * inner);
  }
  NodePtr nx = node_of(x);
  return make_result(os, std::move(out), "narrow", {&x},
                     [nx, outer, len, inner, start, length](Node& self) {
                       auto* g = grad_of(nx);
                       for (std::size_t o = 0; o < outer; ++o) {
                         const double* src = self.grad.data() + o * length * inner;
                         double* dst = g->data() + (o * len + start) * inner;
                         for (std::size_t i = 0; i < length * inner; ++i) dst[i] += src[i];
                       }
                     });
}

Tensor select(const Tensor& x, std::size_t axis, std::size_t index) {
  Tensor n = narrow(x, axis, index, 1);
  Shape s = x.shape();
  s.erase(s.begin() + axis);
  if (s.empty()) s = {1};
  return reshape(n, s);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  for (const auto& p : parts) require_defined(p, "concat");
  Shape os = parts[0].shape();
  if (axis >= os.size()) throw ShapeError("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape ps = p.shape();
    if (ps.size() != os.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t k = 0; k < ps.size(); ++k) {
      if (k != axis && ps[k] != os[k]) {
        throw ShapeError("concat: " + shape_str(ps) + " vs " + shape_str(os));
      }
    }
    total += ps[axis];
  }
  os[axis] = total;
  const std::size_t outer = numel(Shape(os.begin(), os.begin() + axis));
  const std::size_t inner = numel(Shape(os.begin() + axis + 1, os.end()));
  std::vector<double> out(numel(os));
  std::vector<std::size_t> widths;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * inner;
    widths.push_back(w);
    const auto pv = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data() + o * w, w, out.data() + o * total * inner + off);
    }
    off += w;
  }
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(node_of(p));

  // make_result takes a fixed initializer list; wire the variadic parents by hand.
  check_finite(out, "concat");
  auto node = std::make_shared<Node>();
  node->shape = os;
  node->value = std::move(out);
  node->op = "concat";
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parts) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents = nodes;
    const std::size_t row = total * inner;
    node->backward = [nodes, widths, outer, row](Node& self) {
      std::size_t off = 0;
      for (std::size_t p = 0; p < nodes.size(); ++p) {
        if (auto* g = grad_of(nodes[p])) {
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = self.grad.data() + o * row + off;
            double* dst = g->data() + o * widths[p];
            for (std::size_t i = 0; i < widths[p]; ++i) dst[i] += src[i];
          }
        }
        off += widths[p];
      }
    };
  }
  return Tensor(std::move(node));
}

Tensor delay_shift(const Tensor& x) {
  require_defined(x, "delay_shift");
  if (x.rank() != 3) throw ShapeError("delay_shift expects (B,T,D), got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
  std::vector<double> out(B * T * D, 0.0);
  const auto xv = x.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 1; t < T; ++t) {
      std::copy_n(xv.data() + (b * T + t - 1) * D, D, out.data() + (b * T + t) * D);
    }
  }
  NodePtr nx = node_of(x);
  return make_result(x.shape(), std::move(out), "delay_shift", {&x}, [nx, B, T, D](Node& self) {
    auto* g = grad_of(nx);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t t = 1; t < T; ++t) {
        for (std::size_t d = 0; d < D; ++d) {
          (*g)[(b * T + t - 1) * D + d] += self.grad[(b * T + t) * D + d];
        }
      }
    }
  });
}

// ---------------------------------------------------------------- layers

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw ShapeError("softmax of empty vector");
  for (double v : logits) {
    if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    z += out[i];
  }
  for (auto& v : out) v /= z;
  return out;
}

Tensor softmax(const Tensor& logits) {
  require_defined(logits, "softmax");
  const std::size_t M = logits.shape().back();
  const std::size_t rows = logits.size() / M;
  std::vector<double> out(logits.size());
  const auto lv = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    auto p = softmax(lv.subspan(r * M, M));
    std::copy(p.begin(), p.end(), out.begin() + r * M);
  }
  NodePtr nx = node_of(logits);
  return make_result(logits.shape(), std::move(out), "softmax", {&logits},
                     [nx, M, rows](Node& self) {
                       auto* g = grad_of(nx);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* y = self.value.data() + r * M;
                         const double* gy = self.grad.data() + r * M;
                         double dot = 0.0;
                         for (std::size_t i = 0; i < M; ++i) dot += gy[i] * y[i];
                         for (std::size_t i = 0; i < M; ++i) (*g)[r * M + i] += y[i] * (gy[i] - dot);
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_defined(x, "linear");
  require_defined(weight, "linear");
  if (weight.rank() != 2) throw ShapeError("linear: weight must be (d_out, d_in)");
  const std::size_t dout = weight.dim(0), din = weight.dim(1);
  if (x.rank() == 0 || x.shape().back() != din) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " +
                     shape_str(weight.shape()));
  }
  if (bias.defined() && bias.shape() != Shape{dout}) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " vs d_out " +
                     std::to_string(dout));
  }
  const std::size_t N = x.size() / din;
  Shape os = x.shape();
  os.back() = dout;
  std::vector<double> out(N * dout);
  const double* xv = x.data().data();
  const double* wv = weight.data().data();
  const double* bv = bias.defined() ? bias.data().data() : nullptr;
  for (std::size_t n = 0; n < N; ++n) {
    const double* xr = xv + n * din;
    for (std::size_t o = 0; o < dout; ++o) {
      const double* wr = wv + o * din;
      double acc = bv ? bv[o] : 0.0;
      for (std::size_t i = 0; i < din; ++i) acc += xr[i] * wr[i];
      out[n * dout + o] = acc;
    }
  }
  NodePtr nx = node_of(x), nw = node_of(weight), nb = node_of(bias);
  return make_result(std::move(os), std::move(out), "linear", {&x, &weight, &bias},
                     [nx, nw, nb, N, din, dout](Node& self) {
                       const double* gy = self.grad.data();
                       auto* gx = grad_of(nx);
                       auto* gw = grad_of(nw);
                       auto* gb = grad_of(nb);
                       for (std::size_t n = 0; n < N; ++n) {
                         const double* xr = nx->value.data() + n * din;
                         for (std::size_t o = 0; o < dout; ++o) {
                           const double go = gy[n * dout + o];
                           if (go == 0.0) continue;
                           if (gx) {
                             const double* wr = nw->value.data() + o * din;
                             double* gxr = gx->data() + n * din;
                             for (std::size_t i = 0; i < din; ++i) gxr[i] += go * wr[i];
                           }
                           if (gw) {
                             double* gwr = gw->data() + o * din;
                             for (std::size_t i = 0; i < din; ++i) gwr[i] += go * xr[i];
                           }
                           if (gb) (*gb)[o] += go;
                         }
                       }
                     });
}

Tensor rms_norm(const Tensor& x, const Tensor& scale_param, double eps) {
  require_defined(x, "rms_norm");
  require_defined(scale_param, "rms_norm");
  const std::size_t D = x.shape().back();
  const std::size_t S = scale_param.size();
  if (D == 0) throw ShapeError("rms_norm: empty feature axis");
  if (S != 1 && S != D) throw ShapeError("rms_norm: scale must have 1 or D entries");
  const std::size_t rows = x.size() / D;
  const auto xv = x.data();
  const auto sv = scale_param.data();
  std::vector<double> out(x.size());
  auto inv = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ms = 0.0;
    for (std::size_t d = 0; d < D; ++d) ms += xv[r * D + d] * xv[r * D + d];
    ms /= static_cast<double>(D);
    const double rms = std::sqrt(ms + eps);
    (*inv)[r] = rms > 0.0 ? 1.0 / rms : 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      out[r * D + d] = xv[r * D + d] * (*inv)[r] * sv[S == 1 ? 0 : d];
    }
  }
  NodePtr nx = node_of(x), ns = node_of(scale_param);
  return make_result(x.shape(), std::move(out), "rms_norm", {&x, &scale_param},
                     [nx, ns, inv, rows, D, S](Node& self) {
                       auto* gx = grad_of(nx);
                       auto* gs = grad_of(ns);
                       std::vector<double> gn(D);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double iv = (*inv)[r];
                         const double* xr = nx->value.data() + r * D;
                         const double* gy = self.grad.data() + r * D;
                         double dot = 0.0;
                         for (std::size_t d = 0; d < D; ++d) {
                           const double n = xr[d] * iv;
                           const double s = ns->value[S == 1 ? 0 : d];
                           if (gs) (*gs)[S == 1 ? 0 : d] += gy[d] * n;
                           gn[d] = gy[d] * s;
                           dot += gn[d] * n;
                         }
                         if (gx) {
                           dot /= static_cast<double>(D);
                           for (std::size_t d = 0; d < D; ++d) {
                             (*gx)[r * D + d] += (gn[d] - xr[d] * iv * dot) * iv;
                           }
                         }
                       }
                     });
}

Tensor dropout(const Tensor& x, double rate, Mode mode, Rng* rng) {
  require_defined(x, "dropout");
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout rate must be in [0,1), got " + std::to_string(rate));
  }
  if (mode == Mode::Eval || rate == 0.0) return x;
  if (!rng) throw ConfigError("dropout in train mode needs an RNG");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double keep = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(x.size());
  for (auto& m : *mask) m = u(*rng) < rate ? 0.0 : keep;
  std::vector<double> out(x.size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * (*mask)[i];
  NodePtr nx = node_of(x);
  return make_result(x.shape(), std::move(out), "dropout", {&x}, [nx, mask](Node& self) {
    auto* g = grad_of(nx);
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * (*mask)[i];
  });
}

Tensor orthogonalize(const Tensor& delta, const Tensor& base, double eps) {
  require_defined(delta, "orthogonalize");
  require_defined(base, "orthogonalize");
  if (delta.rank() != 2) throw ShapeError("orthogonalize: delta must be (B,D)");
  const std::size_t B = delta.dim(0), D = delta.dim(1);
  const bool shared = base.rank() == 1;
  if ((shared && base.dim(0) != D) || (!shared && base.shape() != delta.shape())) {
    throw ShapeError("orthogonalize: baseline " + shape_str(base.shape()) +
                     " incompatible with " + shape_str(delta.shape()));
  }
  const auto dv = delta.data();
  const auto bv = base.data();
  std::vector<double> out(B * D);
  for (std::size_t r = 0; r < B; ++r) {
    const double* br = bv.data() + (shared ? 0 : r * D);
    const double* xr = dv.data() + r * D;
    double a = 0.0, n = eps;
    for (std::size_t d = 0; d < D; ++d) {
      a += xr[d] * br[d];
      n += br[d] * br[d];
    }
    const double c = n > 0.0 ? a / n : 0.0;
    for (std::size_t d = 0; d < D; ++d) out[r * D + d] = xr[d] - c * br[d];
  }
  NodePtr nd = node_of(delta), nb = node_of(base);
  return make_result(delta.shape(), std::move(out), "orthogonalize", {&delta, &base},
                     [nd, nb, B, D, shared, eps](Node& self) {
                       auto* gd = grad_of(nd);
                       auto* gb = grad_of(nb);
                       for (std::size_t r = 0; r < B; ++r) {
                         const std::size_t bo = shared ? 0 : r * D;
                         const double* br = nb->value.data() + bo;
                         const double* xr = nd->value.data() + r * D;
                         const double* g = self.grad.data() + r * D;
                         double a = 0.0, n = eps, gdotb = 0.0;
                         for (std::size_t d = 0; d < D; ++d) {
                           a += xr[d] * br[d];
                           n += br[d] * br[d];
                           gdotb += g[d] * br[d];
                         }
                         if (n <= 0.0) {
                           if (gd) {
                             for (std::size_t d = 0; d < D; ++d) (*gd)[r * D + d] += g[d];
                           }
                           continue;
                         }
                         const double c = a / n;
                         if (gd) {
                           for (std::size_t d = 0; d < D; ++d) {
                             (*gd)[r * D + d] += g[d] - (gdotb / n) * br[d];
                           }
                         }
                         if (gb) {
                           for (std::size_t e = 0; e < D; ++e) {
                             (*gb)[bo + e] += -(xr[e] / n) * gdotb +
                                              (2.0 * a * br[e] / (n * n)) * gdotb - c * g[e];
                           }
                         }
                       }
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels,
                     std::span<const double> class_weights) {
  require_defined(logits, "cross_entropy");
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be (B,M)");
  const std::size_t B = logits.dim(0), M = logits.dim(1);
  if (labels.size() != B) throw ShapeError("cross_entropy: label count != batch size");
  if (!class_weights.empty() && class_weights.size() != M) {
    throw ShapeError("cross_entropy: class weight count != M");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= M) {
      throw LabelError("label " + std::to_string(y) + " outside [0," + std::to_string(M) + ")");
    }
  }
  const auto lv = logits.data();
  auto probs = std::make_shared<std::vector<double>>(B * M);
  auto weights = std::make_shared<std::vector<double>>(B, 1.0);
  double total_w = 0.0, loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    auto p = softmax(lv.subspan(b * M, M));
    std::copy(p.begin(), p.end(), probs->begin() + b * M);
    const double* row = lv.data() + b * M;
    const double mx = *std::max_element(row, row + M);
    double z = 0.0;
    for (std::size_t m = 0; m < M; ++m) z += std::exp(row[m] - mx);
    const double nll = mx + std::log(z) - row[labels[b]];
    const double w = class_weights.empty() ? 1.0 : class_weights[labels[b]];
    (*weights)[b] = w;
    total_w += w;
    loss += w * nll;
  }
  if (total_w <= 0.0) throw ConfigError("cross_entropy: class weights sum to zero");
  loss /= total_w;
  std::vector<int> ys(labels.begin(), labels.end());
  NodePtr nx = node_of(logits);
  return make_result({1}, {loss}, "cross_entropy", {&logits},
                     [nx, probs, weights, ys, B, M, total_w](Node& self) {
                       auto* g = grad_of(nx);
                       const double go = self.grad[0] / total_w;
                       for (std::size_t b = 0; b < B; ++b) {
                         const double w = go * (*weights)[b];
                         for (std::size_t m = 0; m < M; ++m) {
                           const double onehot = static_cast<int>(m) == ys[b] ? 1.0 : 0.0;
                           (*g)[b * M + m] += w * ((*probs)[b * M + m] - onehot);
                         }
                       }
                     });
}

// ---------------------------------------------------------------- attention

AttentionMask AttentionMask::full(std::size_t rows, std::size_t cols) {
  return {rows, cols, std::vector<std::uint8_t>(rows * cols, 1)};
}

AttentionMask AttentionMask::lower(std::size_t rows, std::size_t cols, std::ptrdiff_t offset) {
  AttentionMask m{rows, cols, std::vector<std::uint8_t>(rows * cols, 0)};
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      m.allowed[i * cols + j] =
          static_cast<std::ptrdiff_t>(j) <= static_cast<std::ptrdiff_t>(i) + offset;
    }
  }
  return m;
}

AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                     std::size_t heads, const AttentionMask* mask) {
  require_defined(q, "attention");
  require_defined(k, "attention");
  require_defined(v, "attention");
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) {
    throw ShapeError("attention expects (B,L,D) inputs");
  }
  const std::size_t B = q.dim(0), Lq = q.dim(1), D = q.dim(2), Lk = k.dim(1);
  if (k.dim(0) != B || v.dim(0) != B || k.dim(2) != D || v.dim(2) != D || v.dim(1) != Lk) {
    throw ShapeError("attention: Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()) +
                     ", V " + shape_str(v.shape()));
  }
  if (heads == 0 || D % heads != 0) {
    throw ConfigError("attention: model dim " + std::to_string(D) +
                      " not divisible by heads " + std::to_string(heads));
  }
  if (Lk == 0) throw MaskError("attention: no keys");
  if (mask) {
    if (mask->rows != Lq || mask->cols != Lk) throw ShapeError("attention: mask shape");
    for (std::size_t i = 0; i < Lq; ++i) {
      bool any = false;
      for (std::size_t j = 0; j < Lk; ++j) any = any || (*mask)(i, j);
      if (!any) throw MaskError("attention: query row " + std::to_string(i) + " fully masked");
    }
  }
  const std::size_t H = heads, dk = D / H;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  const double* qv = q.data().data();
  const double* kv = k.data().data();
  const double* vv = v.data().data();
  auto probs = std::make_shared<std::vector<double>>(B * H * Lq * Lk, 0.0);
  std::vector<double> out(B * Lq * D, 0.0);
  std::vector<double> logits(Lk);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < Lq; ++i) {
        const double* qi = qv + (b * Lq + i) * D + h * dk;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < Lk; ++j) {
          if (mask && !(*mask)(i, j)) continue;
          const double* kj = kv + (b * Lk + j) * D + h * dk;
          double s = 0.0;
          for (std::size_t d = 0; d < dk; ++d) s += qi[d] * kj[d];
          logits[j] = s * inv_sqrt;
          mx = std::max(mx, logits[j]);
        }
        double* p = probs->data() + ((b * H + h) * Lq + i) * Lk;
        double z = 0.0;
        for (std::size_t j = 0; j < Lk; ++j) {
          if (mask && !(*mask)(i, j)) continue;
          p[j] = std::exp(logits[j] - mx);
          z += p[j];
        }
        double* oi = out.data() + (b * Lq + i) * D + h * dk;
        for (std::size_t j = 0; j < Lk; ++j) {
          if (p[j] == 0.0) continue;
          p[j] /= z;
          const double* vj = vv + (b * Lk + j) * D + h * dk;
          for (std::size_t d = 0; d < dk; ++d) oi[d] += p[j] * vj[d];
        }
      }
    }
  }
  Tensor weights = Tensor::from({B, H, Lq, Lk}, *probs);
  NodePtr nq = node_of(q), nk = node_of(k), nv = node_of(v);
  Tensor output = make_result(
      {B, Lq, D}, std::move(out), "attention", {&q, &k, &v},
      [nq, nk, nv, probs, B, H, Lq, Lk, D, dk, inv_sqrt](Node& self) {
        auto* gq = grad_of(nq);
        auto* gk = grad_of(nk);
        auto* gv = grad_of(nv);
        std::vector<double> dp(Lk);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < Lq; ++i) {
              const double* p = probs->data() + ((b * H + h) * Lq + i) * Lk;
              const double* go = self.grad.data() + (b * Lq + i) * D + h * dk;
              double pdp = 0.0;
              for (std::size_t j = 0; j < Lk; ++j) {
                dp[j] = 0.0;
                if (p[j] == 0.0) continue;
                const double* vj = nv->value.data() + (b * Lk + j) * D + h * dk;
                for (std::size_t d = 0; d < dk; ++d) dp[j] += go[d] * vj[d];
                pdp += p[j] * dp[j];
                if (gv) {
                  double* gvj = gv->data() + (b * Lk + j) * D + h * dk;
                  for (std::size_t d = 0; d < dk; ++d) gvj[d] += p[j] * go[d];
                }
              }
              const double* qi = nq->value.data() + (b * Lq + i) * D + h * dk;
              for (std::size_t j = 0; j < Lk; ++j) {
                if (p[j] == 0.0) continue;
                const double ds = p[j] * (dp[j] - pdp) * inv_sqrt;
                const double* kj = nk->value.data() + (b * Lk + j) * D + h * dk;
                if (gq) {
                  double* gqi = gq->data() + (b * Lq + i) * D + h * dk;
                  for (std::size_t d = 0; d < dk; ++d) gqi[d] += ds * kj[d];
                }
                if (gk) {
                  double* gkj = gk->data() + (b * Lk + j) * D + h * dk;
                  for (std::size_t d = 0; d < dk; ++d) gkj[d] += ds * qi[d];
                }
              }
            }
          }
        }
      });
  return {std::move(output), std::move(weights)};
}

}  // namespace castformer
