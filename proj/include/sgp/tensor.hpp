#pragma once

// Dense row-major tensor with a define-by-run gradient tape.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sgp/error.hpp"

namespace sgp {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables tape recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct TensorImpl;

template <typename T>
struct TapeNode {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  // Reads the owning tensor (its data and grad) and accumulates into inputs.
  std::function<void(const TensorImpl<T>& self)> backward;
};

template <typename T>
struct TensorImpl {
  Shape dims;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::unique_ptr<TapeNode<T>> node;

  void accumulate_grad(std::size_t i, T v) {
    if (grad.empty()) grad.assign(data.size(), T(0));
    grad[i] += v;
  }
  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <typename T = float>
class Tensor {
 public:
  using value_type = T;
  using Impl = TensorImpl<T>;

  Tensor() : impl_(std::make_shared<Impl>()) {}

  explicit Tensor(Shape dims, T fill = T(0)) : impl_(std::make_shared<Impl>()) {
    impl_->data.assign(sgp::numel(dims), fill);
    impl_->dims = std::move(dims);
  }

  Tensor(Shape dims, std::vector<T> data) : impl_(std::make_shared<Impl>()) {
    if (sgp::numel(dims) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(dims));
    }
    impl_->dims = std::move(dims);
    impl_->data = std::move(data);
  }

  static Tensor zeros(Shape dims) { return Tensor(std::move(dims)); }
  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  // Trainable leaf.
  static Tensor parameter(Shape dims, std::vector<T> data) {
    Tensor t(std::move(dims), std::move(data));
    t.impl_->requires_grad = true;
    return t;
  }

  const Shape& dims() const { return impl_->dims; }
  std::size_t dim(std::size_t i) const { return impl_->dims.at(i); }
  std::size_t rank() const { return impl_->dims.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  // Parameter updates and in-place fixture setup only; never on tape outputs.
  std::span<T> mutable_data() { return impl_->data; }
  const std::vector<T>& vec() const { return impl_->data; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(dims()));
    return impl_->data[0];
  }
  T operator[](std::size_t i) const { return impl_->data[i]; }
  T at(std::size_t i, std::size_t j) const { return impl_->data[i * impl_->dims.at(1) + j]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  bool is_leaf() const { return impl_->node == nullptr; }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Zero-filled view when no gradient has been accumulated.
  std::vector<T> grad() const {
    return impl_->grad.empty() ? std::vector<T>(numel(), T(0)) : impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  // New leaf sharing no tape history.
  Tensor detach() const { return Tensor(dims(), impl_->data); }
  Tensor clone() const { return detach(); }

  const std::shared_ptr<Impl>& impl() const { return impl_; }
  bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }

  // Used by ops: wraps a freshly computed result and records it on the tape.
  static Tensor make_result(Shape dims, std::vector<T> data, const char* op,
                            std::vector<std::shared_ptr<Impl>> inputs,
                            std::function<void(const Impl&)> backward) {
    Tensor out(std::move(dims), std::move(data));
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in->requires_grad;
    if (!any) return out;
    out.impl_->requires_grad = true;
    auto node = std::make_unique<TapeNode<T>>();
    node->op = op;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    out.impl_->node = std::move(node);
    return out;
  }

 private:
  std::shared_ptr<Impl> impl_;
};

// Topological order (inputs before outputs) of every grad-requiring node reachable from root.
template <typename T>
std::vector<TensorImpl<T>*> topo_order(TensorImpl<T>* root) {
  std::vector<TensorImpl<T>*> order;
  std::unordered_set<TensorImpl<T>*> seen;
  // (node, next input index)
  std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack;
  if (!root->requires_grad) return order;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (n->node && idx < n->node->inputs.size()) {
      TensorImpl<T>* child = n->node->inputs[idx++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(n);
    stack.pop_back();
  }
  return order;
}

// Reverse-mode pass. Leaf grads accumulate across calls; interior grads are rebuilt each call.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.dims()));
  }
  TensorImpl<T>* root = loss.impl().get();
  if (!root->requires_grad) {
    throw ContractError("backward() on a tensor that is not connected to any parameter");
  }
  auto order = topo_order(root);
  for (auto* n : order) {
    if (n->node) n->grad.assign(n->data.size(), T(0));
  }
  root->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl<T>* n = *it;
    if (n->node && n->node->backward) n->node->backward(*n);
  }
  // Interior buffers are scratch; release them so memory tracks parameters only.
  for (auto* n : order) {
    if (n->node && n != root) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

template <typename T, typename U>
Tensor<U> cast(const Tensor<T>& t) {
  std::vector<U> out(t.numel());
  std::transform(t.data().begin(), t.data().end(), out.begin(), [](T v) { return U(v); });
  return Tensor<U>(t.dims(), std::move(out));
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.dims() == b.dims() &&
         (a.numel() == 0 || std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(T)) == 0);
}

}  // namespace sgp
