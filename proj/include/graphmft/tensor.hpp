#pragma once

// Dense row-major tensors (rank 1 and 2) with reverse-mode automatic
// differentiation. Every differentiable op builds a node holding its output
// values, links to its inputs, and a closure that scatters the output
// gradient back to them. backward() replays those closures in reverse
// topological order.
//
// The scalar type is a template parameter: float is the training precision,
// double exists so gradient checks can run at tolerances finite differences
// can actually meet.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "graphmft/util.hpp"

namespace graphmft {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {

template <typename Real>
struct TensorNode {
  Shape shape;
  std::vector<Real> values;
  std::vector<Real> grad;  // allocated lazily, same length as values
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backprop;  // empty for leaves

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), Real(0));
  }
};

}  // namespace detail

template <typename Real>
class Tensor;

namespace detail {
template <typename Real>
Tensor<Real> borrow(TensorNode<Real>* node);
}  // namespace detail

template <typename Real>
class Tensor {
  using Node = detail::TensorNode<Real>;

 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), Real(0), requires_grad);
  }

  static Tensor full(Shape shape, Real value, bool requires_grad = false) {
    check_shape(shape);
    auto node = std::make_shared<Node>();
    node->values.assign(shape_numel(shape), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false) {
    check_shape(shape);
    if (shape_numel(shape) != values.size()) {
      throw std::invalid_argument("tensor: shape " + shape_str(shape) + " needs " +
                                  std::to_string(shape_numel(shape)) + " values, got " +
                                  std::to_string(values.size()));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(Real value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->values.size(); }

  std::size_t rows() const {
    require_rank(2, "rows()");
    return node_->shape[0];
  }
  std::size_t cols() const {
    require_rank(2, "cols()");
    return node_->shape[1];
  }

  Real* data() { return node_->values.data(); }
  const Real* data() const { return node_->values.data(); }
  std::span<const Real> values() const { return node_->values; }

  Real& at(std::size_t i) { return node_->values.at(i); }
  Real at(std::size_t i) const { return node_->values.at(i); }
  Real& at(std::size_t r, std::size_t c) {
    require_rank(2, "at(r,c)");
    return node_->values[r * cols() + c];
  }
  Real at(std::size_t r, std::size_t c) const {
    require_rank(2, "at(r,c)");
    return node_->values[r * cols() + c];
  }

  Real item() const {
    if (size() != 1) {
      throw std::invalid_argument("item(): tensor has " + std::to_string(size()) + " elements");
    }
    return node_->values[0];
  }

  bool requires_grad() const { return node_->requires_grad; }

  void set_requires_grad(bool v) {
    if (!node_->leaf) {
      throw std::logic_error("set_requires_grad: only valid on leaf tensors");
    }
    node_->requires_grad = v;
  }

  bool has_grad() const { return node_->grad.size() == node_->values.size(); }

  std::span<const Real> grad() const {
    node_->ensure_grad();
    return node_->grad;
  }

  // Tensor is a handle: gradient storage stays writable through const copies
  // (the backward closures capture their inputs as const handles).
  std::span<Real> grad_mut() const {
    node_->ensure_grad();
    return node_->grad;
  }

  void zero_grad() { node_->grad.assign(node_->values.size(), Real(0)); }

  // Detached value copy (fresh leaf, no graph history).
  Tensor clone() const {
    auto node = std::make_shared<Node>();
    node->shape = node_->shape;
    node->values = node_->values;
    node->requires_grad = node_->requires_grad;
    return Tensor(std::move(node));
  }

  bool all_finite() const {
    for (Real v : node_->values) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw std::invalid_argument("tensor: empty shape");
    for (auto d : shape) {
      if (d == 0) throw std::invalid_argument("tensor: zero-sized dimension");
    }
  }

  void require_rank(std::size_t r, const char* what) const {
    if (node_->shape.size() != r) {
      throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(r) +
                                  ", tensor is " + shape_str(node_->shape));
    }
  }

  std::shared_ptr<Node> node_;

  template <typename R>
  friend Tensor<R> make_op_result(Shape, std::vector<R>,
                                  std::vector<Tensor<R>>);
  template <typename R>
  friend void set_backprop(Tensor<R>&, std::function<void()>);
  template <typename R>
  friend Tensor<R> detail::borrow(detail::TensorNode<R>*);
};

namespace detail {

// Non-owning view of a live node. Backward closures refer to their own output
// through this instead of capturing the owning handle: a closure that owned
// its node would close a shared_ptr cycle and leak every recorded graph. The
// raw pointer is safe because a closure only runs inside backward(), while
// the node is kept alive by its consumers (or by the loss handle itself).
template <typename Real>
Tensor<Real> borrow(TensorNode<Real>* node) {
  return Tensor<Real>(
      std::shared_ptr<TensorNode<Real>>(std::shared_ptr<TensorNode<Real>>(), node));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// op plumbing

template <typename Real>
Tensor<Real> make_op_result(Shape shape, std::vector<Real> values,
                            std::vector<Tensor<Real>> inputs) {
  auto node = std::make_shared<detail::TensorNode<Real>>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->leaf = false;
  for (const auto& in : inputs) {
    if (in.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node());
  }
  return Tensor<Real>(std::move(node));
}

template <typename Real>
void set_backprop(Tensor<Real>& t, std::function<void()> fn) {
  if (t.requires_grad()) t.node()->backprop = std::move(fn);
}

// backward(): reverse-mode sweep from a scalar loss. Non-leaf gradients in the
// reachable subgraph are reset first; leaf gradients accumulate across calls.
template <typename Real>
void backward(const Tensor<Real>& loss) {
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw std::invalid_argument("backward: loss does not require grad (no recorded ops)");
  }

  using Node = detail::TensorNode<Real>;
  // Iterative post-order DFS: the resulting list is a topological order of the
  // recorded ops (inputs always precede the ops that consume them).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* node : order) {
    if (node->leaf) {
      node->ensure_grad();
    } else {
      node->grad.assign(node->values.size(), Real(0));
    }
  }
  loss.node()->grad[0] = Real(1);

  // Each op is visited exactly once, in reverse topological order.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop();
  }
}

// ---------------------------------------------------------------------------
// shape helpers

namespace detail {

template <typename Real>
void require_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

template <typename Real>
void require_rank2(const Tensor<Real>& a, const char* op) {
  if (a.rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got " +
                                shape_str(a.shape()));
  }
}

inline void require_axis(std::size_t axis, std::size_t rank, const char* op) {
  if (axis >= rank) {
    throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                " invalid for rank " + std::to_string(rank));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matrix products

// matmul(a[m x k], b[k x n]) -> [m x n]; also accepts rank-1 b[k] -> [m].
template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_rank2(a, "matmul");
  const bool vec = b.rank() == 1;
  const std::size_t m = a.rows(), k = a.cols();
  const std::size_t kb = vec ? b.shape()[0] : b.rows();
  const std::size_t n = vec ? 1 : b.cols();
  if (k != kb) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }

  std::vector<Real> out(m * n, Real(0));
  const Real* pa = a.data();
  const Real* pb = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t l = 0; l < k; ++l) {
      const Real av = pa[i * k + l];
      if (av == Real(0)) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * pb[l * n + j];
    }
  }

  Shape out_shape = vec ? Shape{m} : Shape{m, n};
  auto result = make_op_result<Real>(std::move(out_shape), std::move(out), {a, b});
  set_backprop(result, [a, b, rn = result.node().get(), m, k, n]() mutable {
    auto result = detail::borrow(rn);
    const Real* g = result.grad().data();
    const Real* pa = a.data();
    const Real* pb = b.data();
    if (a.requires_grad()) {
      auto ga = a.grad_mut();
      // dA = G * B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
          Real acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * pb[l * n + j];
          ga[i * k + l] += acc;
        }
    }
    if (b.requires_grad()) {
      auto gb = b.grad_mut();
      // dB = A^T * G
      for (std::size_t l = 0; l < k; ++l)
        for (std::size_t i = 0; i < m; ++i) {
          const Real av = pa[i * k + l];
          if (av == Real(0)) continue;
          for (std::size_t j = 0; j < n; ++j) gb[l * n + j] += av * g[i * n + j];
        }
    }
  });
  return result;
}

// linear(x[m x k], w[n x k]) -> x * w^T, the row-major-friendly affine map.
// Optional bias[n] is added to every output row.
template <typename Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w) {
  return linear(x, w, Tensor<Real>());
}

template <typename Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& bias) {
  detail::require_rank2(x, "linear");
  detail::require_rank2(w, "linear");
  const std::size_t m = x.rows(), k = x.cols(), n = w.rows();
  if (w.cols() != k) {
    throw std::invalid_argument("linear: weight " + shape_str(w.shape()) +
                                " incompatible with input " + shape_str(x.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.shape()[0] != n)) {
    throw std::invalid_argument("linear: bias " + shape_str(bias.shape()) + " must be [" +
                                std::to_string(n) + "]");
  }

  std::vector<Real> out(m * n, Real(0));
  const Real* px = x.data();
  const Real* pw = w.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      Real acc = has_bias ? bias.at(j) : Real(0);
      for (std::size_t l = 0; l < k; ++l) acc += px[i * k + l] * pw[j * k + l];
      out[i * n + j] = acc;
    }

  std::vector<Tensor<Real>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  auto result = make_op_result<Real>({m, n}, std::move(out), std::move(inputs));
  set_backprop(result, [x, w, bias, rn = result.node().get(), m, k, n, has_bias]() mutable {
    auto result = detail::borrow(rn);
    const Real* g = result.grad().data();
    if (x.requires_grad()) {
      auto gx = x.grad_mut();
      const Real* pw = w.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const Real gv = g[i * n + j];
          if (gv == Real(0)) continue;
          for (std::size_t l = 0; l < k; ++l) gx[i * k + l] += gv * pw[j * k + l];
        }
    }
    if (w.requires_grad()) {
      auto gw = w.grad_mut();
      const Real* px = x.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const Real gv = g[i * n + j];
          if (gv == Real(0)) continue;
          for (std::size_t l = 0; l < k; ++l) gw[j * k + l] += gv * px[i * k + l];
        }
    }
    if (has_bias && bias.requires_grad()) {
      auto gb = bias.grad_mut();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
  return result;
}

// ---------------------------------------------------------------------------
// elementwise arithmetic

namespace detail {

// add/sub support equal shapes, a rank-1 row vector against a rank-2 left
// operand, and scalar (size-1) right operands.
enum class BroadcastKind { Same, Row, RightScalar };

template <typename Real>
BroadcastKind classify_broadcast(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
  if (a.shape() == b.shape()) return BroadcastKind::Same;
  if (b.size() == 1) return BroadcastKind::RightScalar;
  if (a.rank() == 2 && b.rank() == 1 && b.shape()[0] == a.cols()) return BroadcastKind::Row;
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
                              " and " + shape_str(b.shape()));
}

}  // namespace detail

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  const auto kind = detail::classify_broadcast(a, b, "add");
  std::vector<Real> out(a.values().begin(), a.values().end());
  const std::size_t n = out.size();
  const std::size_t bc = b.size();
  switch (kind) {
    case detail::BroadcastKind::Same:
      for (std::size_t i = 0; i < n; ++i) out[i] += b.at(i);
      break;
    case detail::BroadcastKind::RightScalar:
      for (std::size_t i = 0; i < n; ++i) out[i] += b.at(0);
      break;
    case detail::BroadcastKind::Row:
      for (std::size_t i = 0; i < n; ++i) out[i] += b.at(i % bc);
      break;
  }
  auto result = make_op_result<Real>(a.shape(), std::move(out), {a, b});
  set_backprop(result, [a, b, rn = result.node().get(), kind, n, bc]() mutable {
    auto result = detail::borrow(rn);
    const Real* g = result.grad().data();
    if (a.requires_grad()) {
      auto ga = a.grad_mut();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_mut();
      switch (kind) {
        case detail::BroadcastKind::Same:
          for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
          break;
        case detail::BroadcastKind::RightScalar:
          for (std::size_t i = 0; i < n; ++i) gb[0] += g[i];
          break;
        case detail::BroadcastKind::Row:
          for (std::size_t i = 0; i < n; ++i) gb[i % bc] += g[i];
          break;
      }
    }
  });
  return result;
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  const auto kind = detail::classify_broadcast(a, b, "sub");
  std::vector<Real> out(a.values().begin(), a.values().end());
  const std::size_t n = out.size();
  const std::size_t bc = b.size();
  switch (kind) {
    case detail::BroadcastKind::Same:
      for (std::size_t i = 0; i < n; ++i) out[i] -= b.at(i);
      break;
    case detail::BroadcastKind::RightScalar:
      for (std::size_t i = 0; i < n; ++i) out[i] -= b.at(0);
      break;
    case detail::BroadcastKind::Row:
      for (std::size_t i = 0; i < n; ++i) out[i] -= b.at(i % bc);
      break;
  }
  auto result = make_op_result<Real>(a.shape(), std::move(out), {a, b});
  set_backprop(result, [a, b, rn = result.node().get(), kind, n, bc]() mutable {
    auto result = detail::borrow(rn);
    const Real* g = result.grad().data();
    if (a.requires_grad()) {
      auto ga = a.grad_mut();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_mut();
      switch (kind) {
        case detail::BroadcastKind::Same:
          for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
          break;
        case detail::BroadcastKind::RightScalar:
          for (std::size_t i = 0; i < n; ++i) gb[0] -= g[i];
          break;
        case detail::BroadcastKind::Row:
          for (std::size_t i = 0; i < n; ++i) gb[i % bc] -= g[i];
          break;
      }
    }
  });
  return result;
}

// Hadamard product; right operand may be a size-1 scalar tensor.
template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  const bool scalar_b = b.size() == 1 && a.shape() != b.shape();
  if (!scalar_b) detail::require_same_shape(a, b, "mul");
  const std::size_t n = a.size();
  std::vector<Real> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.at(i) * b.at(scalar_b ? 0 : i);
  auto result = make_op_result<Real>(a.shape(), std::move(out), {a, b});
  set_backprop(result, [a, b, rn = result.node().get(), n, scalar_b]() mutable {
    auto result = detail::borrow(rn);
    const Real* g = result.grad().data();
    if (a.requires_grad()) {
      auto ga = a.grad_mut();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * b.at(scalar_b ? 0 : i);
    }
    if (b.requires_grad()) {
      auto gb = b.grad_mut();
      for (std::size_t i = 0; i < n; ++i) gb[scalar_b ? 0 : i] += g[i] * a.at(i);
    }
  });
  return result;
}

// Multiplication by a plain constant (not a graph input).
template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
  const std::size_t n = a.size();
  std::vector<Real> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.at(i) * c;
  auto result = make_op_result<Real>(a.shape(), std::move(out), {a});
  set_backprop(result, [a, rn = result.node().get(), c, n]() mutable {
    auto result = detail::borrow(rn);
    if (!a.requires_grad()) return;
    const Real* g = result.grad().data();
    auto ga = a.grad_mut();
    for (std::size_t i = 0; i < n; ++i) ga[i] += c * g[i];
  });
  return result;
}

// ---------------------------------------------------------------------------
// activations

template <typename Real>
Tensor<Real> leaky_relu(const Tensor<Real>& a, Real slope) {
  const std::size_t n = a.size();
  std::vector<Real> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Real v = a.at(i);
    out[i] = v > Real(0) ? v : slope * v;
  }
  auto result = make_op_result<Real>(a.shape(), std::move(out), {a});
  set_backprop(result, [a, rn = result.node().get(), slope, n]() mutable {
    auto result = detail::borrow(rn);
    if (!a.requires_grad()) return;
    const Real* g = result.grad().data();
    auto ga = a.grad_mut();
    for (std::size_t i = 0; i < n; ++i) ga[i] += (a.at(i) > Real(0) ? Real(1) : slope) * g[i];
  });
  return result;
}

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& a) {
  return leaky_relu(a, Real(0));
}

template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& a) {
  const std::size_t n = a.size();
  std::vector<Real> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = Real(1) / (Real(1) + std::exp(-a.at(i)));
  auto result = make_op_result<Real>(a.shape(), std::move(out), {a});
  set_backprop(result, [a, rn = result.node().get(), n]() mutable {
    auto result = detail::borrow(rn);
    if (!a.requires_grad()) return;
    const Real* g = result.grad().data();
    auto ga = a.grad_mut();
    for (std::size_t i = 0; i < n; ++i) {
      const Real y = result.at(i);
      ga[i] += y * (Real(1) - y) * g[i];
    }
  });
  return result;
}

template <typename Real>
Tensor<Real> tanh_act(const Tensor<Real>& a) {
  const std::size_t n = a.size();
  std::vector<Real> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(a.at(i));
  auto result = make_op_result<Real>(a.shape(), std::move(out), {a});
  set_backprop(result, [a, rn = result.node().get(), n]() mutable {
    auto result = detail::borrow(rn);
    if (!a.requires_grad()) return;
    const Real* g = result.grad().data();
    auto ga = a.grad_mut();
    for (std::size_t i = 0; i < n; ++i) {
      const Real y = result.at(i);
      ga[i] += (Real(1) - y * y) * g[i];
    }
  });
  return result;
}

// Inverted dropout: each element keeps its value with probability 1-rate and
// is scaled by 1/(1-rate); in eval mode the input passes through untouched.
template <typename Real>
Tensor<Real> dropout(const Tensor<Real>& a, Real rate, bool training, Rng& rng) {
  if (!(rate >= Real(0) && rate < Real(1))) {
    throw std::invalid_argument("dropout: rate must be in [0,1), got " +
                                std::to_string(static_cast<double>(rate)));
  }
  if (!training || rate == Real(0)) return a;

  const std::size_t n = a.size();
  const Real keep_scale = Real(1) / (Real(1) - rate);
  auto mask = std::make_shared<std::vector<Real>>(n);
  std::vector<Real> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Real m = rng.bernoulli(static_cast<double>(rate)) ? Real(0) : keep_scale;
    (*mask)[i] = m;
    out[i] = a.at(i) * m;
  }
  auto result = make_op_result<Real>(a.shape(), std::move(out), {a});
  set_backprop(result, [a, rn = result.node().get(), mask, n]() mutable {
    auto result = detail::borrow(rn);
    if (!a.requires_grad()) return;
    const Real* g = result.grad().data();
    auto ga = a.grad_mut();
    for (std::size_t i = 0; i < n; ++i) ga[i] += (*mask)[i] * g[i];
  });
  return result;
}

// ---------------------------------------------------------------------------
// shape ops

template <typename Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const std::size_t rank = parts[0].rank();
  detail::require_axis(axis, rank, "concat");
  for (const auto& p : parts) {
    if (p.rank() != rank) throw std::invalid_argument("concat: mixed ranks");
    for (std::size_t d = 0; d < rank; ++d) {
      if (d != axis && p.shape()[d] != parts[0].shape()[d]) {
        throw std::invalid_argument("concat: shape mismatch off axis, " +
                                    shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
      }
    }
  }

  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) out_shape[axis] += p.shape()[axis];

  const std::size_t out_cols = rank == 2 ? out_shape[1] : 1;
  std::vector<Real> out(shape_numel(out_shape));
  std::size_t offset = 0;  // running offset along the concat axis
  for (const auto& p : parts) {
    if (rank == 1 || axis == 0) {
      std::copy(p.values().begin(), p.values().end(), out.begin() + offset * out_cols);
      offset += p.shape()[0];
    } else {
      const std::size_t pc = p.cols();
      for (std::size_t r = 0; r < p.rows(); ++r)
        std::copy_n(p.data() + r * pc, pc, out.begin() + r * out_cols + offset);
      offset += pc;
    }
  }

  auto result = make_op_result<Real>(out_shape, std::move(out), parts);
  set_backprop(result, [parts, rn = result.node().get(), axis, rank, out_cols]() mutable {
    auto result = detail::borrow(rn);
    const Real* g = result.grad().data();
    std::size_t offset = 0;
    for (auto& p : parts) {
      if (rank == 1 || axis == 0) {
        if (p.requires_grad()) {
          auto gp = p.grad_mut();
          const std::size_t n = p.size();
          for (std::size_t i = 0; i < n; ++i) gp[i] += g[offset * out_cols + i];
        }
        offset += p.shape()[0];
      } else {
        const std::size_t pc = p.cols();
        if (p.requires_grad()) {
          auto gp = p.grad_mut();
          for (std::size_t r = 0; r < p.rows(); ++r)
            for (std::size_t c = 0; c < pc; ++c) gp[r * pc + c] += g[r * out_cols + offset + c];
        }
        offset += pc;
      }
    }
  });
  return result;
}

// Contiguous sub-block along one axis.
template <typename Real>
Tensor<Real> slice(const Tensor<Real>& a, std::size_t axis, std::size_t begin, std::size_t count) {
  detail::require_axis(axis, a.rank(), "slice");
  if (count == 0 || begin + count > a.shape()[axis]) {
    throw std::invalid_argument("slice: range [" + std::to_string(begin) + "," +
                                std::to_string(begin + count) + ") invalid for axis size " +
                                std::to_string(a.shape()[axis]));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = count;
  std::vector<Real> out(shape_numel(out_shape));
  const std::size_t cols = a.rank() == 2 ? a.cols() : 1;
  if (a.rank() == 1 || axis == 0) {
    std::copy_n(a.data() + begin * cols, count * cols, out.begin());
  } else {
    for (std::size_t r = 0; r < a.rows(); ++r)
      std::copy_n(a.data() + r * cols + begin, count, out.begin() + r * count);
  }
  auto result = make_op_result<Real>(out_shape, std::move(out), {a});
  set_backprop(result, [a, rn = result.node().get(), axis, begin, count, cols]() mutable {
    auto result = detail::borrow(rn);
    if (!a.requires_grad()) return;
    const Real* g = result.grad().data();
    auto ga = a.grad_mut();
    if (a.rank() == 1 || axis == 0) {
      const std::size_t n = count * cols;
      for (std::size_t i = 0; i < n; ++i) ga[begin * cols + i] += g[i];
    } else {
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < count; ++c) ga[r * cols + begin + c] += g[r * count + c];
    }
  });
  return result;
}

// ---------------------------------------------------------------------------
// reductions

template <typename Real>
Tensor<Real> sum_all(const Tensor<Real>& a) {
  Real acc = 0;
  for (Real v : a.values()) acc += v;
  auto result = make_op_result<Real>({1}, {acc}, {a});
  set_backprop(result, [a, rn = result.node().get()]() mutable {
    auto result = detail::borrow(rn);
    if (!a.requires_grad()) return;
    const Real g = result.grad()[0];
    auto ga = a.grad_mut();
    for (auto& v : ga) v += g;
  });
  return result;
}

// Axis reduction on a rank-2 tensor: axis 0 collapses rows, axis 1 columns.
template <typename Real>
Tensor<Real> sum_axis(const Tensor<Real>& a, std::size_t axis) {
  detail::require_rank2(a, "sum_axis");
  detail::require_axis(axis, 2, "sum_axis");
  const std::size_t m = a.rows(), n = a.cols();
  const std::size_t out_n = axis == 0 ? n : m;
  std::vector<Real> out(out_n, Real(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[axis == 0 ? j : i] += a.at(i, j);
  auto result = make_op_result<Real>({out_n}, std::move(out), {a});
  set_backprop(result, [a, rn = result.node().get(), axis, m, n]() mutable {
    auto result = detail::borrow(rn);
    if (!a.requires_grad()) return;
    const Real* g = result.grad().data();
    auto ga = a.grad_mut();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[axis == 0 ? j : i];
  });
  return result;
}

// ---------------------------------------------------------------------------
// softmax family (max-shifted for stability)

namespace detail {

template <typename Real>
void softmax_span(const Real* in, Real* out, std::size_t n) {
  Real mx = in[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
  Real denom = 0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(in[i] - mx);
    denom += out[i];
  }
  for (std::size_t i = 0; i < n; ++i) out[i] /= denom;
}

template <typename Real>
void log_softmax_span(const Real* in, Real* out, std::size_t n) {
  Real mx = in[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
  Real denom = 0;
  for (std::size_t i = 0; i < n; ++i) denom += std::exp(in[i] - mx);
  const Real log_denom = std::log(denom) + mx;
  for (std::size_t i = 0; i < n; ++i) out[i] = in[i] - log_denom;
}

// Iterate the 1-d lanes a row/column axis reduction acts on.
template <typename Real, typename Fn>
void for_each_lane(const Tensor<Real>& a, std::size_t axis, Fn&& fn) {
  if (a.rank() == 1) {
    fn(0, 1, a.size());  // start, stride, count
    return;
  }
  const std::size_t m = a.rows(), n = a.cols();
  if (axis == 1) {
    for (std::size_t i = 0; i < m; ++i) fn(i * n, 1, n);
  } else {
    for (std::size_t j = 0; j < n; ++j) fn(j, n, m);
  }
}

}  // namespace detail

template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& a, std::size_t axis = 1) {
  if (a.rank() == 2) detail::require_axis(axis, 2, "softmax");
  std::vector<Real> out(a.size());
  std::vector<Real> lane_in, lane_out;
  detail::for_each_lane(a, axis, [&](std::size_t start, std::size_t stride, std::size_t count) {
    lane_in.resize(count);
    lane_out.resize(count);
    for (std::size_t i = 0; i < count; ++i) lane_in[i] = a.at(start + i * stride);
    detail::softmax_span(lane_in.data(), lane_out.data(), count);
    for (std::size_t i = 0; i < count; ++i) out[start + i * stride] = lane_out[i];
  });
  auto result = make_op_result<Real>(a.shape(), std::move(out), {a});
  set_backprop(result, [a, rn = result.node().get(), axis]() mutable {
    auto result = detail::borrow(rn);
    if (!a.requires_grad()) return;
    const Real* g = result.grad().data();
    auto ga = a.grad_mut();
    detail::for_each_lane(a, axis, [&](std::size_t start, std::size_t stride, std::size_t count) {
      Real dot = 0;
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t idx = start + i * stride;
        dot += g[idx] * result.at(idx);
      }
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t idx = start + i * stride;
        ga[idx] += result.at(idx) * (g[idx] - dot);
      }
    });
  });
  return result;
}

template <typename Real>
Tensor<Real> log_softmax(const Tensor<Real>& a, std::size_t axis = 1) {
  if (a.rank() == 2) detail::require_axis(axis, 2, "log_softmax");
  std::vector<Real> out(a.size());
  std::vector<Real> lane_in, lane_out;
  detail::for_each_lane(a, axis, [&](std::size_t start, std::size_t stride, std::size_t count) {
    lane_in.resize(count);
    lane_out.resize(count);
    for (std::size_t i = 0; i < count; ++i) lane_in[i] = a.at(start + i * stride);
    detail::log_softmax_span(lane_in.data(), lane_out.data(), count);
    for (std::size_t i = 0; i < count; ++i) out[start + i * stride] = lane_out[i];
  });
  auto result = make_op_result<Real>(a.shape(), std::move(out), {a});
  set_backprop(result, [a, rn = result.node().get(), axis]() mutable {
    auto result = detail::borrow(rn);
    if (!a.requires_grad()) return;
    const Real* g = result.grad().data();
    auto ga = a.grad_mut();
    detail::for_each_lane(a, axis, [&](std::size_t start, std::size_t stride, std::size_t count) {
      Real gsum = 0;
      for (std::size_t i = 0; i < count; ++i) gsum += g[start + i * stride];
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t idx = start + i * stride;
        ga[idx] += g[idx] - std::exp(result.at(idx)) * gsum;
      }
    });
  });
  return result;
}

// ---------------------------------------------------------------------------
// gather / scatter

// Row gather: out[i] = a[indices[i]]. The adjoint scatter-adds back, so a row
// selected twice accumulates two gradient contributions.
template <typename Real>
Tensor<Real> gather_rows(const Tensor<Real>& a, const std::vector<std::size_t>& indices) {
  detail::require_rank2(a, "gather_rows");
  const std::size_t n = a.cols();
  for (auto idx : indices) {
    if (idx >= a.rows()) {
      throw std::out_of_range("gather_rows: index " + std::to_string(idx) +
                              " out of range for " + std::to_string(a.rows()) + " rows");
    }
  }
  std::vector<Real> out(indices.size() * n);
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::copy_n(a.data() + indices[i] * n, n, out.begin() + i * n);
  auto result = make_op_result<Real>({indices.size(), n}, std::move(out), {a});
  set_backprop(result, [a, rn = result.node().get(), indices, n]() mutable {
    auto result = detail::borrow(rn);
    if (!a.requires_grad()) return;
    const Real* g = result.grad().data();
    auto ga = a.grad_mut();
    for (std::size_t i = 0; i < indices.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) ga[indices[i] * n + j] += g[i * n + j];
  });
  return result;
}

// One element per row: out[i] = a[i, cols[i]].
template <typename Real>
Tensor<Real> pick_per_row(const Tensor<Real>& a, const std::vector<std::size_t>& cols) {
  detail::require_rank2(a, "pick_per_row");
  if (cols.size() != a.rows()) {
    throw std::invalid_argument("pick_per_row: " + std::to_string(cols.size()) +
                                " indices for " + std::to_string(a.rows()) + " rows");
  }
  const std::size_t n = a.cols();
  std::vector<Real> out(cols.size());
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] >= n) {
      throw std::out_of_range("pick_per_row: column " + std::to_string(cols[i]) +
                              " out of range for " + std::to_string(n) + " columns");
    }
    out[i] = a.at(i, cols[i]);
  }
  auto result = make_op_result<Real>({cols.size()}, std::move(out), {a});
  set_backprop(result, [a, rn = result.node().get(), cols, n]() mutable {
    auto result = detail::borrow(rn);
    if (!a.requires_grad()) return;
    const Real* g = result.grad().data();
    auto ga = a.grad_mut();
    for (std::size_t i = 0; i < cols.size(); ++i) ga[i * n + cols[i]] += g[i];
  });
  return result;
}

// ---------------------------------------------------------------------------
// segment ops (the attention kernels)

// Softmax over groups of a rank-1 score vector. segments[i] names the group of
// element i; every group present is normalized independently (max-shifted).
template <typename Real>
Tensor<Real> segment_softmax(const Tensor<Real>& scores, const std::vector<std::size_t>& segments,
                             std::size_t num_segments) {
  if (scores.rank() != 1 || scores.size() != segments.size()) {
    throw std::invalid_argument("segment_softmax: scores " + shape_str(scores.shape()) +
                                " vs " + std::to_string(segments.size()) + " segment ids");
  }
  const std::size_t n = scores.size();
  const Real lowest = std::numeric_limits<Real>::lowest();
  std::vector<Real> seg_max(num_segments, lowest);
  for (std::size_t i = 0; i < n; ++i) {
    if (segments[i] >= num_segments) {
      throw std::out_of_range("segment_softmax: segment id " + std::to_string(segments[i]) +
                              " >= " + std::to_string(num_segments));
    }
    seg_max[segments[i]] = std::max(seg_max[segments[i]], scores.at(i));
  }
  std::vector<Real> seg_denom(num_segments, Real(0));
  std::vector<Real> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(scores.at(i) - seg_max[segments[i]]);
    seg_denom[segments[i]] += out[i];
  }
  for (std::size_t i = 0; i < n; ++i) out[i] /= seg_denom[segments[i]];

  auto result = make_op_result<Real>({n}, std::move(out), {scores});
  set_backprop(result, [scores, rn = result.node().get(), segments, num_segments, n]() mutable {
    auto result = detail::borrow(rn);
    if (!scores.requires_grad()) return;
    const Real* g = result.grad().data();
    std::vector<Real> seg_dot(num_segments, Real(0));
    for (std::size_t i = 0; i < n; ++i) seg_dot[segments[i]] += g[i] * result.at(i);
    auto gs = scores.grad_mut();
    for (std::size_t i = 0; i < n; ++i)
      gs[i] += result.at(i) * (g[i] - seg_dot[segments[i]]);
  });
  return result;
}

// out[s] = sum over elements i with segments[i]==s of weights[i] * values[i].
// values is [n x d]; the result is [num_segments x d] (untouched segments stay
// zero rows).
template <typename Real>
Tensor<Real> segment_weighted_sum(const Tensor<Real>& values, const Tensor<Real>& weights,
                                  const std::vector<std::size_t>& segments,
                                  std::size_t num_segments) {
  detail::require_rank2(values, "segment_weighted_sum");
  if (weights.rank() != 1 || weights.size() != values.rows() ||
      segments.size() != values.rows()) {
    throw std::invalid_argument("segment_weighted_sum: values " + shape_str(values.shape()) +
                                ", weights " + shape_str(weights.shape()) + ", " +
                                std::to_string(segments.size()) + " segment ids");
  }
  const std::size_t n = values.rows(), d = values.cols();
  std::vector<Real> out(num_segments * d, Real(0));
  for (std::size_t i = 0; i < n; ++i) {
    if (segments[i] >= num_segments) {
      throw std::out_of_range("segment_weighted_sum: segment id " + std::to_string(segments[i]) +
                              " >= " + std::to_string(num_segments));
    }
    const Real w = weights.at(i);
    for (std::size_t j = 0; j < d; ++j) out[segments[i] * d + j] += w * values.at(i, j);
  }
  auto result = make_op_result<Real>({num_segments, d}, std::move(out), {values, weights});
  set_backprop(result, [values, weights, rn = result.node().get(), segments, n, d]() mutable {
    auto result = detail::borrow(rn);
    const Real* g = result.grad().data();
    if (values.requires_grad()) {
      auto gv = values.grad_mut();
      for (std::size_t i = 0; i < n; ++i) {
        const Real w = weights.at(i);
        for (std::size_t j = 0; j < d; ++j) gv[i * d + j] += w * g[segments[i] * d + j];
      }
    }
    if (weights.requires_grad()) {
      auto gw = weights.grad_mut();
      for (std::size_t i = 0; i < n; ++i) {
        Real acc = 0;
        for (std::size_t j = 0; j < d; ++j) acc += values.at(i, j) * g[segments[i] * d + j];
        gw[i] += acc;
      }
    }
  });
  return result;
}

}  // namespace graphmft
