#pragma once

// Tape-based reverse-mode differentiation over dense row-major tensors.
//
// Operations record onto the tape that is active on the calling thread (see
// TapeScope). With no active tape, or when no input requires a gradient, ops
// only compute values; that is the inference path used for evaluation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rdpd/errors.hpp"

namespace rdpd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Clamp applied before every log of a probability.
inline constexpr double kProbEpsilon = 1e-12;

template <class Real>
class Tape;

namespace detail {

template <class Real>
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool requires_grad = false;
  Tape<Real>* tape = nullptr;
  std::function<void(Node&)> backward;

  Real* grad_buffer() {
    if (!requires_grad) return nullptr;
    if (grad.empty()) grad.assign(value.size(), Real(0));
    return grad.data();
  }
};

}  // namespace detail

template <class Real>
class Tensor {
 public:
  using Node = detail::Node<Real>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<Real> values) {
    validate(shape, values.size());
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape) {
    const std::size_t n = shape_numel(shape);
    return constant(std::move(shape), std::vector<Real>(n, Real(0)));
  }

  static Tensor scalar(Real v) { return constant({1}, {v}); }

  // Leaf that accumulates gradients across backward passes until zero_grad.
  static Tensor parameter(Shape shape, std::vector<Real> values) {
    Tensor t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    t.node_->grad.assign(t.node_->value.size(), Real(0));
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const Real> data() const { return node_->value; }
  // Direct writes are only meaningful on leaves (optimizer updates, loading).
  std::span<Real> mutable_data() { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const Real> grad() const { return node_->grad; }
  std::span<Real> mutable_grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->value.size(), Real(0));
    return node_->grad;
  }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), Real(0)); }

  Real item() const {
    if (numel() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->value[0];
  }

  Real operator[](std::size_t flat) const { return node_->value.at(flat); }

  Tensor detach() const { return constant(shape(), node_->value); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  static void validate(const Shape& shape, std::size_t n) {
    if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape));
    }
    if (shape_numel(shape) != n) {
      throw ShapeError("shape " + shape_str(shape) + " does not match " +
                       std::to_string(n) + " values");
    }
  }

  std::shared_ptr<Node> node_;
};

// Ordered record of primitive applications. Creation order is a topological
// order, so backward walks the record in reverse.
template <class Real>
class Tape {
 public:
  using Node = detail::Node<Real>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_slot(); }

  void record(const std::shared_ptr<Node>& node) {
    // Recording after a backward pass starts a new forward pass.
    if (consumed_) clear();
    node->tape = this;
    nodes_.push_back(node);
  }

  void backward(const Tensor<Real>& loss) {
    if (loss.numel() != 1) {
      throw UsageError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    }
    if (consumed_) {
      throw UsageError("backward called twice without a new forward pass");
    }
    consumed_ = true;
    const auto& root = loss.node();
    if (root->tape != this) return;  // constant w.r.t. every parameter
    root->grad_buffer()[0] = Real(1);
    auto it = std::find(nodes_.rbegin(), nodes_.rend(), root);
    for (; it != nodes_.rend(); ++it) {
      Node& n = **it;
      if (!n.grad.empty() && n.backward) n.backward(n);
    }
  }

  void clear() {
    for (auto& n : nodes_) {
      n->tape = nullptr;
      n->backward = nullptr;
    }
    nodes_.clear();
    consumed_ = false;
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  ~Tape() {
    clear();
    if (active_slot() == this) active_slot() = nullptr;
  }

 private:
  template <class>
  friend class TapeScope;

  static Tape*& active_slot() {
    thread_local Tape* slot = nullptr;
    return slot;
  }

  std::vector<std::shared_ptr<Node>> nodes_;
  bool consumed_ = false;
};

// Makes `tape` the recording target for the current thread; nullptr disables
// recording.
template <class Real>
class TapeScope {
 public:
  explicit TapeScope(Tape<Real>* tape) : previous_(Tape<Real>::active_slot()) {
    Tape<Real>::active_slot() = tape;
  }
  ~TapeScope() { Tape<Real>::active_slot() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Real>* previous_;
};

template <class Real>
using NoGradScope = TapeScope<Real>;

// Backward through the tape the loss was recorded on. A loss that was never
// recorded is constant; its backward leaves every gradient untouched.
template <class Real>
void backward(const Tensor<Real>& loss) {
  if (loss.numel() != 1) {
    throw UsageError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  }
  if (Tape<Real>* tape = loss.node()->tape) {
    tape->backward(loss);
  } else if (Tape<Real>* act = Tape<Real>::active()) {
    act->backward(loss);
  }
}

namespace detail {

template <class Real>
void check_finite(const std::vector<Real>& v, const char* op) {
  for (Real x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + " produced a non-finite value");
  }
}

template <class Real>
bool any_requires_grad(std::initializer_list<const Tensor<Real>*> inputs) {
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <class Real>
Tensor<Real> make_result(const char* op, Shape shape, std::vector<Real> value, bool needs_grad,
                         std::function<void(Node<Real>&)> fn) {
  check_finite(value, op);
  Tensor<Real> out = Tensor<Real>::constant(std::move(shape), std::move(value));
  Tape<Real>* tape = Tape<Real>::active();
  if (tape && needs_grad) {
    auto& node = out.node();
    node->requires_grad = true;
    node->backward = std::move(fn);
    tape->record(node);
  }
  return out;
}

// b broadcasts against a when shapes match, b is a single value, or b's
// shape equals the trailing dimensions of a.
template <class Real>
void check_broadcast(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa == sb || b.numel() == 1) return;
  if (sb.size() < sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin())) return;
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(sb) + " onto " +
                   shape_str(sa));
}

template <class Real, class Fwd, class DA, class DB>
Tensor<Real> binary_op(const char* op, const Tensor<Real>& a, const Tensor<Real>& b, Fwd fwd,
                       DA da, DB db) {
  check_broadcast(a, b, op);
  const std::size_t n = a.numel();
  const std::size_t nb = b.numel();
  std::vector<Real> out(n);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i % nb]);
  auto an = a.node();
  auto bn = b.node();
  return make_result<Real>(op, a.shape(), std::move(out), any_requires_grad<Real>({&a, &b}),
                           [an, bn, da, db](Node<Real>& self) {
                             const std::size_t n = an->value.size();
                             const std::size_t nb = bn->value.size();
                             if (Real* ga = an->grad_buffer()) {
                               for (std::size_t i = 0; i < n; ++i) {
                                 ga[i] += self.grad[i] * da(an->value[i], bn->value[i % nb]);
                               }
                             }
                             if (Real* gb = bn->grad_buffer()) {
                               for (std::size_t i = 0; i < n; ++i) {
                                 gb[i % nb] += self.grad[i] * db(an->value[i], bn->value[i % nb]);
                               }
                             }
                           });
}

// `dfdx` receives (input, output).
template <class Real, class Fwd, class Deriv>
Tensor<Real> unary_op(const char* op, const Tensor<Real>& a, Fwd fwd, Deriv dfdx) {
  const auto av = a.data();
  std::vector<Real> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  auto an = a.node();
  return make_result<Real>(op, a.shape(), std::move(out), a.requires_grad(),
                           [an, dfdx](Node<Real>& self) {
                             if (Real* ga = an->grad_buffer()) {
                               for (std::size_t i = 0; i < self.value.size(); ++i) {
                                 ga[i] += self.grad[i] * dfdx(an->value[i], self.value[i]);
                               }
                             }
                           });
}

// Splits a shape around its last axis: rows = product of leading dims.
inline std::pair<std::size_t, std::size_t> rows_cols(const Shape& s) {
  const std::size_t cols = s.back();
  return {shape_numel(s) / cols, cols};
}

inline Shape drop_last(const Shape& s) {
  if (s.size() == 1) return {1};
  return Shape(s.begin(), s.end() - 1);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.numel() < b.numel()) return add(b, a);
  return detail::binary_op<Real>(
      "add", a, b, [](Real x, Real y) { return x + y; }, [](Real, Real) { return Real(1); },
      [](Real, Real) { return Real(1); });
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary_op<Real>(
      "sub", a, b, [](Real x, Real y) { return x - y; }, [](Real, Real) { return Real(1); },
      [](Real, Real) { return Real(-1); });
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.numel() < b.numel()) return mul(b, a);
  return detail::binary_op<Real>(
      "mul", a, b, [](Real x, Real y) { return x * y; }, [](Real, Real y) { return y; },
      [](Real x, Real) { return x; });
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& a, Real s) {
  return detail::unary_op<Real>(
      "scale", a, [s](Real x) { return s * x; }, [s](Real, Real) { return s; });
}

template <class Real>
Tensor<Real> tanh(const Tensor<Real>& a) {
  return detail::unary_op<Real>(
      "tanh", a, [](Real x) { return std::tanh(x); },
      [](Real, Real y) { return Real(1) - y * y; });
}

// Subgradient 0 at x = 0.
template <class Real>
Tensor<Real> relu(const Tensor<Real>& a) {
  return detail::unary_op<Real>(
      "relu", a, [](Real x) { return x > Real(0) ? x : Real(0); },
      [](Real x, Real) { return x > Real(0) ? Real(1) : Real(0); });
}

template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& a) {
  return detail::unary_op<Real>(
      "sigmoid", a,
      [](Real x) {
        if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
        const Real e = std::exp(x);
        return e / (Real(1) + e);
      },
      [](Real, Real y) { return y * (Real(1) - y); });
}

template <class Real>
Tensor<Real> exp(const Tensor<Real>& a) {
  return detail::unary_op<Real>(
      "exp", a, [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
}

template <class Real>
Tensor<Real> log(const Tensor<Real>& a) {
  for (Real x : a.data()) {
    if (!(x > Real(0))) throw DomainError("log of non-positive value");
  }
  return detail::unary_op<Real>(
      "log", a, [](Real x) { return std::log(x); }, [](Real x, Real) { return Real(1) / x; });
}

// ---------------------------------------------------------------------------
// Reductions and layout

template <class Real>
Tensor<Real> sum(const Tensor<Real>& a) {
  Real s = 0;
  for (Real x : a.data()) s += x;
  auto an = a.node();
  return detail::make_result<Real>("sum", {1}, {s}, a.requires_grad(),
                                   [an](detail::Node<Real>& self) {
                                     if (Real* ga = an->grad_buffer()) {
                                       for (std::size_t i = 0; i < an->value.size(); ++i) {
                                         ga[i] += self.grad[0];
                                       }
                                     }
                                   });
}

template <class Real>
Tensor<Real> mean(const Tensor<Real>& a) {
  return scale(sum(a), Real(1) / static_cast<Real>(a.numel()));
}

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  auto an = a.node();
  return detail::make_result<Real>("reshape", std::move(shape),
                                   std::vector<Real>(a.data().begin(), a.data().end()),
                                   a.requires_grad(), [an](detail::Node<Real>& self) {
                                     if (Real* ga = an->grad_buffer()) {
                                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                         ga[i] += self.grad[i];
                                       }
                                     }
                                   });
}

// Half-open range [begin, end) along `axis`.
template <class Real>
Tensor<Real> slice(const Tensor<Real>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  if (axis >= s.size() || begin >= end || end > s[axis]) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") on axis " + std::to_string(axis) + " of " + shape_str(s));
  }
  const std::size_t outer = shape_numel(Shape(s.begin(), s.begin() + axis));
  const std::size_t inner = shape_numel(Shape(s.begin() + axis + 1, s.end()));
  const std::size_t dim = s[axis];
  const std::size_t width = end - begin;
  Shape os = s;
  os[axis] = width;
  std::vector<Real> out(outer * width * inner);
  const auto av = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(av.begin() + (o * dim + begin) * inner, width * inner,
                out.begin() + o * width * inner);
  }
  auto an = a.node();
  return detail::make_result<Real>(
      "slice", std::move(os), std::move(out), a.requires_grad(),
      [an, outer, inner, dim, width, begin](detail::Node<Real>& self) {
        if (Real* ga = an->grad_buffer()) {
          for (std::size_t o = 0; o < outer; ++o) {
            const Real* g = self.grad.data() + o * width * inner;
            Real* dst = ga + (o * dim + begin) * inner;
            for (std::size_t i = 0; i < width * inner; ++i) dst[i] += g[i];
          }
        }
      });
}

template <class Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& s0 = parts.front().shape();
  if (axis >= s0.size()) throw ShapeError("concat axis out of range for " + shape_str(s0));
  std::size_t total = 0;
  bool needs_grad = false;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != s0[d]) {
        throw ShapeError("concat: " + shape_str(s) + " vs " + shape_str(s0));
      }
    }
    total += s[axis];
    needs_grad = needs_grad || p.requires_grad();
  }
  const std::size_t outer = shape_numel(Shape(s0.begin(), s0.begin() + axis));
  const std::size_t inner = shape_numel(Shape(s0.begin() + axis + 1, s0.end()));
  Shape os = s0;
  os[axis] = total;
  std::vector<Real> out(outer * total * inner);
  std::vector<std::shared_ptr<detail::Node<Real>>> nodes;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis);
    const auto pv = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + o * w * inner, w * inner, out.begin() + (o * total + off) * inner);
    }
    nodes.push_back(p.node());
    offsets.push_back(off);
    off += w;
  }
  return detail::make_result<Real>(
      "concat", std::move(os), std::move(out), needs_grad,
      [nodes, offsets, outer, inner, total, axis](detail::Node<Real>& self) {
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          Real* gp = nodes[k]->grad_buffer();
          if (!gp) continue;
          const std::size_t w = nodes[k]->shape[axis];
          for (std::size_t o = 0; o < outer; ++o) {
            const Real* g = self.grad.data() + (o * total + offsets[k]) * inner;
            Real* dst = gp + o * w * inner;
            for (std::size_t i = 0; i < w * inner; ++i) dst[i] += g[i];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<Real> out(m * n, Real(0));
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    Real* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real aip = av[i * k + p];
      const Real* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<Real>(
      "matmul", {m, n}, std::move(out), detail::any_requires_grad<Real>({&a, &b}),
      [an, bn, m, k, n](detail::Node<Real>& self) {
        const Real* g = self.grad.data();
        if (Real* ga = an->grad_buffer()) {
          // ga += g * b^T, with b transposed once so the inner loop runs over k.
          const Real* bv = bn->value.data();
          std::vector<Real> bt(k * n);
          for (std::size_t p = 0; p < k; ++p) {
            for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = bv[p * n + j];
          }
          for (std::size_t i = 0; i < m; ++i) {
            Real* garow = ga + i * k;
            for (std::size_t j = 0; j < n; ++j) {
              const Real gij = g[i * n + j];
              const Real* btrow = bt.data() + j * k;
              for (std::size_t p = 0; p < k; ++p) garow[p] += gij * btrow[p];
            }
          }
        }
        if (Real* gb = bn->grad_buffer()) {
          const Real* av = an->value.data();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              const Real aip = av[i * k + p];
              for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
            }
          }
        }
      });
}

// Batched matmul: [B x m x k] * [B x k x n] -> [B x m x n].
template <class Real>
Tensor<Real> bmm(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw ShapeError("bmm " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<Real> out(B * m * n, Real(0));
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t t = 0; t < B; ++t) {
    for (std::size_t i = 0; i < m; ++i) {
      Real* row = out.data() + (t * m + i) * n;
      for (std::size_t p = 0; p < k; ++p) {
        const Real aip = av[(t * m + i) * k + p];
        const Real* brow = bv.data() + (t * k + p) * n;
        for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
      }
    }
  }
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<Real>(
      "bmm", {B, m, n}, std::move(out), detail::any_requires_grad<Real>({&a, &b}),
      [an, bn, B, m, k, n](detail::Node<Real>& self) {
        Real* ga = an->grad_buffer();
        Real* gb = bn->grad_buffer();
        const Real* av = an->value.data();
        const Real* bv = bn->value.data();
        for (std::size_t t = 0; t < B; ++t) {
          for (std::size_t i = 0; i < m; ++i) {
            const Real* g = self.grad.data() + (t * m + i) * n;
            for (std::size_t p = 0; p < k; ++p) {
              const Real* brow = bv + (t * k + p) * n;
              if (ga) {
                Real acc = 0;
                for (std::size_t j = 0; j < n; ++j) acc += g[j] * brow[j];
                ga[(t * m + i) * k + p] += acc;
              }
              if (gb) {
                const Real aip = av[(t * m + i) * k + p];
                Real* gbrow = gb + (t * k + p) * n;
                for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * g[j];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

// Valid cross-correlation. x is [S x D] or [N x S x D]; filters [K x w x D];
// bias [K]. Output is [S' x K] (or [N x S' x K]) with S' = (S - w)/stride + 1.
template <class Real>
Tensor<Real> conv1d(const Tensor<Real>& x, const Tensor<Real>& filters, const Tensor<Real>& bias,
                    std::size_t stride) {
  if (x.rank() != 2 && x.rank() != 3) {
    throw ShapeError("conv1d input must be [S x D] or [N x S x D], got " + shape_str(x.shape()));
  }
  if (filters.rank() != 3) throw ShapeError("conv1d filters must be [K x w x D]");
  if (stride == 0) throw ShapeError("conv1d stride must be positive");
  const bool batched = x.rank() == 3;
  const std::size_t N = batched ? x.dim(0) : 1;
  const std::size_t S = x.dim(batched ? 1 : 0);
  const std::size_t D = x.dim(batched ? 2 : 1);
  const std::size_t K = filters.dim(0), w = filters.dim(1);
  if (filters.dim(2) != D) {
    throw ShapeError("conv1d filter depth " + std::to_string(filters.dim(2)) +
                     " != input channels " + std::to_string(D));
  }
  if (bias.numel() != K) throw ShapeError("conv1d bias must have one entry per filter");
  if (w > S) {
    throw ShapeError("conv1d filter width " + std::to_string(w) + " exceeds length " +
                     std::to_string(S));
  }
  const std::size_t So = (S - w) / stride + 1;
  const std::size_t patch = w * D;
  std::vector<Real> out(N * So * K);
  const auto xv = x.data();
  const auto fv = filters.data();
  const auto bv = bias.data();
  // Filters as [patch x K] so the inner loop runs over filters.
  std::vector<Real> ft(patch * K);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < patch; ++i) ft[i * K + k] = fv[k * patch + i];
  }
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t t = 0; t < So; ++t) {
      const Real* px = xv.data() + (n * S + t * stride) * D;
      Real* o = out.data() + (n * So + t) * K;
      std::copy(bv.begin(), bv.end(), o);
      for (std::size_t i = 0; i < patch; ++i) {
        const Real xi = px[i];
        const Real* frow = ft.data() + i * K;
        for (std::size_t k = 0; k < K; ++k) o[k] += xi * frow[k];
      }
    }
  }
  Shape os = batched ? Shape{N, So, K} : Shape{So, K};
  auto xn = x.node();
  auto fn = filters.node();
  auto bn = bias.node();
  return detail::make_result<Real>(
      "conv1d", std::move(os), std::move(out),
      detail::any_requires_grad<Real>({&x, &filters, &bias}),
      [xn, fn, bn, N, S, D, K, So, patch, stride](detail::Node<Real>& self) {
        Real* gx = xn->grad_buffer();
        Real* gf = fn->grad_buffer();
        Real* gbias = bn->grad_buffer();
        const Real* xv = xn->value.data();
        const Real* fv = fn->value.data();
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t t = 0; t < So; ++t) {
            const std::size_t xoff = (n * S + t * stride) * D;
            const Real* g = self.grad.data() + (n * So + t) * K;
            for (std::size_t k = 0; k < K; ++k) {
              const Real gk = g[k];
              if (gk == Real(0)) continue;
              if (gbias) gbias[k] += gk;
              if (gf) {
                Real* pgf = gf + k * patch;
                for (std::size_t i = 0; i < patch; ++i) pgf[i] += gk * xv[xoff + i];
              }
              if (gx) {
                const Real* pf = fv + k * patch;
                for (std::size_t i = 0; i < patch; ++i) gx[xoff + i] += gk * pf[i];
              }
            }
          }
        }
      });
}

// Mean over the second-to-last axis: [S' x K] -> [K], [N x S' x K] -> [N x K].
template <class Real>
Tensor<Real> mean_pool(const Tensor<Real>& x) {
  if (x.rank() != 2 && x.rank() != 3) {
    throw ShapeError("mean_pool expects [S x K] or [N x S x K], got " + shape_str(x.shape()));
  }
  const bool batched = x.rank() == 3;
  const std::size_t N = batched ? x.dim(0) : 1;
  const std::size_t S = x.dim(batched ? 1 : 0);
  const std::size_t K = x.dim(batched ? 2 : 1);
  std::vector<Real> out(N * K, Real(0));
  const auto xv = x.data();
  const Real inv = Real(1) / static_cast<Real>(S);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t k = 0; k < K; ++k) out[n * K + k] += xv[(n * S + s) * K + k];
    }
    for (std::size_t k = 0; k < K; ++k) out[n * K + k] *= inv;
  }
  Shape os = batched ? Shape{N, K} : Shape{K};
  auto xn = x.node();
  return detail::make_result<Real>("mean_pool", std::move(os), std::move(out), x.requires_grad(),
                                   [xn, N, S, K, inv](detail::Node<Real>& self) {
                                     if (Real* gx = xn->grad_buffer()) {
                                       for (std::size_t n = 0; n < N; ++n) {
                                         for (std::size_t s = 0; s < S; ++s) {
                                           for (std::size_t k = 0; k < K; ++k) {
                                             gx[(n * S + s) * K + k] += inv * self.grad[n * K + k];
                                           }
                                         }
                                       }
                                     }
                                   });
}

// ---------------------------------------------------------------------------
// Probability maps

// exp(x_i / T) / sum_j exp(x_j / T) along the last axis.
template <class Real>
Tensor<Real> softmax(const Tensor<Real>& x, Real temperature = Real(1)) {
  if (!(temperature > Real(0))) throw DomainError("softmax temperature must be positive");
  for (Real v : x.data()) {
    if (!std::isfinite(v)) throw NumericError("softmax input is not finite");
  }
  const auto [rows, cols] = detail::rows_cols(x.shape());
  std::vector<Real> out(x.numel());
  const auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = xv.data() + r * cols;
    Real* o = out.data() + r * cols;
    const Real mx = *std::max_element(in, in + cols);
    Real z = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = std::exp((in[c] - mx) / temperature);
      z += o[c];
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  auto xn = x.node();
  const std::size_t nrows = rows, ncols = cols;
  return detail::make_result<Real>(
      "softmax", x.shape(), std::move(out), x.requires_grad(),
      [xn, nrows, ncols, temperature](detail::Node<Real>& self) {
        Real* gx = xn->grad_buffer();
        if (!gx) return;
        for (std::size_t r = 0; r < nrows; ++r) {
          const Real* y = self.value.data() + r * ncols;
          const Real* g = self.grad.data() + r * ncols;
          Real dot = 0;
          for (std::size_t c = 0; c < ncols; ++c) dot += g[c] * y[c];
          for (std::size_t c = 0; c < ncols; ++c) {
            gx[r * ncols + c] += y[c] * (g[c] - dot) / temperature;
          }
        }
      });
}

// -sum_i y_i log(max(p_i, eps)) along the last axis. Both arguments are
// expected to be distributions; only their shapes are checked here.
// Returns one value per row ([1] for vector inputs).
template <class Real>
Tensor<Real> cross_entropy(const Tensor<Real>& y, const Tensor<Real>& p) {
  if (y.shape() != p.shape()) {
    throw ShapeError("cross_entropy " + shape_str(y.shape()) + " vs " + shape_str(p.shape()));
  }
  const Real eps = static_cast<Real>(kProbEpsilon);
  const auto [rows, cols] = detail::rows_cols(p.shape());
  std::vector<Real> out(rows, Real(0));
  const auto yv = y.data();
  const auto pv = p.data();
  for (std::size_t r = 0; r < rows; ++r) {
    Real acc = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const Real yi = yv[r * cols + c];
      if (yi != Real(0)) acc -= yi * std::log(std::max(pv[r * cols + c], eps));
    }
    out[r] = acc;
  }
  auto yn = y.node();
  auto pn = p.node();
  const std::size_t nrows = rows, ncols = cols;
  return detail::make_result<Real>(
      "cross_entropy", detail::drop_last(p.shape()), std::move(out),
      detail::any_requires_grad<Real>({&y, &p}),
      [yn, pn, nrows, ncols, eps](detail::Node<Real>& self) {
        Real* gy = yn->grad_buffer();
        Real* gp = pn->grad_buffer();
        for (std::size_t r = 0; r < nrows; ++r) {
          const Real g = self.grad[r];
          for (std::size_t c = 0; c < ncols; ++c) {
            const std::size_t i = r * ncols + c;
            const Real pi = pn->value[i];
            if (gp && pi > eps) gp[i] -= g * yn->value[i] / pi;
            if (gy) gy[i] -= g * std::log(std::max(pi, eps));
          }
        }
      });
}

// sum_i p_i log(p_i / max(q_i, eps)) along the last axis; zero-mass entries
// of p contribute nothing. q is treated as frozen: it never receives a
// gradient.
template <class Real>
Tensor<Real> kl_divergence(const Tensor<Real>& p, const Tensor<Real>& q) {
  if (p.shape() != q.shape()) {
    throw ShapeError("kl_divergence " + shape_str(p.shape()) + " vs " + shape_str(q.shape()));
  }
  const Real eps = static_cast<Real>(kProbEpsilon);
  const auto [rows, cols] = detail::rows_cols(p.shape());
  std::vector<Real> out(rows, Real(0));
  const auto pv = p.data();
  const auto qv = q.data();
  for (std::size_t r = 0; r < rows; ++r) {
    Real acc = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const Real pi = pv[r * cols + c];
      if (pi > Real(0)) acc += pi * (std::log(pi) - std::log(std::max(qv[r * cols + c], eps)));
    }
    out[r] = acc;
  }
  auto pn = p.node();
  auto qn = q.node();
  const std::size_t nrows = rows, ncols = cols;
  return detail::make_result<Real>(
      "kl_divergence", detail::drop_last(p.shape()), std::move(out), p.requires_grad(),
      [pn, qn, nrows, ncols, eps](detail::Node<Real>& self) {
        Real* gp = pn->grad_buffer();
        if (!gp) return;
        for (std::size_t r = 0; r < nrows; ++r) {
          const Real g = self.grad[r];
          for (std::size_t c = 0; c < ncols; ++c) {
            const std::size_t i = r * ncols + c;
            const Real pi = std::max(pn->value[i], eps);
            gp[i] += g * (std::log(pi) - std::log(std::max(qn->value[i], eps)) + Real(1));
          }
        }
      });
}

}  // namespace rdpd
