#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "capsbench/kernels.hpp"
#include "capsbench/rng.hpp"

namespace capsbench {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (int d : s) n *= static_cast<size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Shape/configuration contract violations.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
// Non-finite values where the contract requires finite ones.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace autograd {

inline bool& grad_mode_flag() {
  thread_local bool on = true;
  return on;
}
inline bool enabled() { return grad_mode_flag(); }

// Disables graph recording in scope (evaluation passes).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

}  // namespace autograd

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a gradient first reaches this node
  bool needs_grad = false;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

// Reverse-mode tensor: a shared handle to a value buffer plus the recorded
// edge back to its inputs. Ops allocate a fresh node per result; backward()
// on a scalar walks the graph once in reverse topological order.
template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : n_(std::make_shared<Node>()) {
    n_->shape = std::move(shape);
    n_->value.assign(shape_numel(n_->shape), fill);
  }

  Tensor(Shape shape, std::vector<T> values) : n_(std::make_shared<Node>()) {
    if (shape_numel(shape) != values.size())
      throw ConfigError("tensor: " + std::to_string(values.size()) +
                        " values for shape " + shape_str(shape));
    n_->shape = std::move(shape);
    n_->value = std::move(values);
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.n_->value) v = static_cast<T>(rng.normal() * stddev);
    return t;
  }

  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.n_->value) v = static_cast<T>(lo + (hi - lo) * rng.next_double());
    return t;
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  size_t numel() const { return n_->value.size(); }

  T* data() { return n_->value.data(); }
  const T* data() const { return n_->value.data(); }
  std::vector<T>& vec() { return n_->value; }
  const std::vector<T>& vec() const { return n_->value; }

  T item() const {
    if (numel() != 1) throw ConfigError("item: tensor has " + std::to_string(numel()) + " elements");
    return n_->value[0];
  }

  // Row-major index for tests and glue code.
  T at(std::initializer_list<int> idx) const {
    size_t off = 0;
    auto it = idx.begin();
    for (size_t d = 0; d < n_->shape.size(); ++d, ++it)
      off = off * static_cast<size_t>(n_->shape[d]) + static_cast<size_t>(*it);
    return n_->value[off];
  }

  Tensor& set_requires_grad(bool b = true) {
    n_->needs_grad = b;
    return *this;
  }
  bool needs_grad() const { return n_ && n_->needs_grad; }

  const std::vector<T>& grad() const {
    n_->ensure_grad();
    return n_->grad;
  }
  void zero_grad() {
    if (n_) n_->grad.clear();
  }

  bool all_finite() const {
    for (const T& v : n_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
  void check_finite(const char* what) const {
    if (!all_finite()) throw NumericError(std::string(what) + ": non-finite value");
  }

  std::shared_ptr<Node> node() const { return n_; }

  // Leaf copy sharing no graph history.
  Tensor detach() const { return Tensor(n_->shape, n_->value); }

  // Reverse-mode accumulation from a scalar. Gradients land in leaf nodes
  // (parameters); repeated calls accumulate into leaves. Interior gradients
  // are per-pass scratch and reset at the start of each walk.
  void backward() const {
    if (!n_ || numel() != 1) throw ConfigError("backward: loss must be a scalar");
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    struct Frame {
      Node* node;
      size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({n_.get(), 0});
    visited.insert(n_.get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < f.node->parents.size()) {
        Node* p = f.node->parents[f.next++].get();
        if (p->needs_grad && visited.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(f.node);
        stack.pop_back();
      }
    }
    for (Node* node : order)
      if (!node->parents.empty()) node->grad.clear();
    n_->ensure_grad();
    n_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
  }

 private:
  std::shared_ptr<Node> n_;
};

// Builds an op result node. The backward closure receives the result node
// (holding the output gradient) and is responsible for accumulating into the
// parents it captured. Recording is skipped when grad mode is off or no
// input needs gradients.
template <typename T>
inline Tensor<T> make_op(Shape shape, std::vector<T> value,
                         std::initializer_list<Tensor<T>> inputs,
                         std::function<void(TensorNode<T>&)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(value));
  if (!autograd::enabled()) return out;
  bool needs = false;
  for (const Tensor<T>& in : inputs)
    if (in.needs_grad()) needs = true;
  if (!needs) return out;
  auto node = out.node();
  node->needs_grad = true;
  for (const Tensor<T>& in : inputs)
    if (in.needs_grad()) node->parents.push_back(in.node());
  node->backward_fn = std::move(backward_fn);
  return out;
}

namespace detail {
template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
}
}  // namespace detail

template <typename T>
inline Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  kernels::add(static_cast<int>(a.numel()), a.data(), b.data(), out.data());
  auto an = a.node();
  auto bn = b.node();
  return make_op<T>(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode<T>& o) {
    const int n = static_cast<int>(o.value.size());
    if (an->needs_grad) {
      an->ensure_grad();
      kernels::axpy(n, T(1), o.grad.data(), an->grad.data());
    }
    if (bn->needs_grad) {
      bn->ensure_grad();
      kernels::axpy(n, T(1), o.grad.data(), bn->grad.data());
    }
  });
}

template <typename T>
inline Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op<T>(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode<T>& o) {
    const int n = static_cast<int>(o.value.size());
    if (an->needs_grad) {
      an->ensure_grad();
      kernels::axpy(n, T(1), o.grad.data(), an->grad.data());
    }
    if (bn->needs_grad) {
      bn->ensure_grad();
      kernels::axpy(n, T(-1), o.grad.data(), bn->grad.data());
    }
  });
}

template <typename T>
inline Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  kernels::mul(static_cast<int>(a.numel()), a.data(), b.data(), out.data());
  auto an = a.node();
  auto bn = b.node();
  return make_op<T>(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode<T>& o) {
    const size_t n = o.value.size();
    if (an->needs_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < n; ++i) an->grad[i] += o.grad[i] * bn->value[i];
    }
    if (bn->needs_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < n; ++i) bn->grad[i] += o.grad[i] * an->value[i];
    }
  });
}

template <typename T>
inline Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  kernels::scale(static_cast<int>(a.numel()), s, a.data(), out.data());
  auto an = a.node();
  return make_op<T>(a.shape(), std::move(out), {a}, [an, s](TensorNode<T>& o) {
    an->ensure_grad();
    kernels::axpy(static_cast<int>(o.value.size()), s, o.grad.data(), an->grad.data());
  });
}

template <typename T>
inline Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.vec());
  for (auto& v : out) v += s;
  auto an = a.node();
  return make_op<T>(a.shape(), std::move(out), {a}, [an](TensorNode<T>& o) {
    an->ensure_grad();
    kernels::axpy(static_cast<int>(o.value.size()), T(1), o.grad.data(), an->grad.data());
  });
}

template <typename T>
inline Tensor<T> sum(const Tensor<T>& a) {
  const T s = kernels::sum(static_cast<int>(a.numel()), a.data());
  auto an = a.node();
  return make_op<T>(Shape{}, std::vector<T>{s}, {a}, [an](TensorNode<T>& o) {
    an->ensure_grad();
    const T g = o.grad[0];
    for (auto& v : an->grad) v += g;
  });
}

template <typename T>
inline Tensor<T> mean(const Tensor<T>& a) {
  return mul_scalar(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
inline Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ConfigError("reshape: numel mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<T> out(a.vec());
  auto an = a.node();
  return make_op<T>(std::move(shape), std::move(out), {a}, [an](TensorNode<T>& o) {
    an->ensure_grad();
    kernels::axpy(static_cast<int>(o.value.size()), T(1), o.grad.data(), an->grad.data());
  });
}

}  // namespace capsbench
