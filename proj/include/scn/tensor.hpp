#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "scn/error.hpp"

namespace scn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

// Gradient recording switch. Disabled inside a NoGradGuard scope.
inline bool& grad_mode_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_mode_enabled()) { grad_mode_enabled() = false; }
  ~NoGradGuard() { grad_mode_enabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first touched by backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const std::vector<T>&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Dense row-major array that can take part in a reverse-mode computation.
///
/// Copies share the underlying node, so a Tensor behaves like a handle. Values
/// produced by an op are never modified afterwards; leaf tensors (parameters)
/// may be updated in place between backward passes.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> values(shape_numel(shape), T(0));
    return from_data(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor from_data(Shape shape, std::vector<T> values, bool requires_grad = false) {
    for (auto extent : shape) {
      if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                           " values, got " + std::to_string(values.size()));
    }
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(T value, bool requires_grad = false) { return from_data({1}, {value}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  // In-place access for leaves only (parameter updates, test fixtures).
  std::span<T> mutable_data() { return node_->value; }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  T operator[](std::size_t flat_index) const { return node_->value[flat_index]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  // Copy of the values with no history.
  Tensor detach() const { return from_data(shape(), node_->value, false); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> converted(node_->value.begin(), node_->value.end());
    return Tensor<U>::from_data(shape(), std::move(converted), false);
  }

  /// Reverse-mode sweep from this scalar. Leaf gradients accumulate; the
  /// recorded graph behind this tensor is released afterwards.
  void backward() {
    if (numel() != 1) throw DimensionError("backward() requires a scalar, got " + shape_str(shape()));
    if (!requires_grad()) throw ArgumentError("backward() on a tensor that does not require grad");

    std::vector<detail::Node<T>*> order;
    std::unordered_set<detail::Node<T>*> visited;
    std::vector<std::pair<detail::Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        auto* parent = node->parents[next++].get();
        if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }

    node_->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node<T>* node = *it;
      if (node->backward && !node->grad.empty()) node->backward(node->grad);
    }
    for (auto* node : order) {
      if (node->backward) {
        node->backward = nullptr;
        node->parents.clear();
        node->grad.clear();
      }
    }
  }

  // Builds the output of an op. Records history only when gradients are
  // enabled and at least one input requires them. The closure receives the
  // output gradient and accumulates into its captured inputs.
  static Tensor make_result(Shape shape, std::vector<T> values, std::initializer_list<Tensor> inputs,
                            std::function<void(const std::vector<T>&)> backward) {
    Tensor out = from_data(std::move(shape), std::move(values), false);
    if (!grad_mode_enabled()) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    for (const auto& in : inputs) out.node_->parents.push_back(in.node_);
    out.node_->backward = std::move(backward);
    return out;
  }

  // Gradient buffer of an input inside a backward closure, or nullptr when
  // that input does not take gradients.
  T* grad_target() const { return node_->requires_grad ? node_->grad_buffer().data() : nullptr; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node<T>> node_;
};

}  // namespace scn
