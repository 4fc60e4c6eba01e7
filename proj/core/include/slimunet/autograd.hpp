#pragma once

// Minimal reverse-mode automatic differentiation over dense tensors.
//
// A Var is a handle to a graph node. Parameters are long-lived leaf nodes owned
// by a model; every op creates a fresh node which records its inputs and a
// backward closure only while gradient recording is enabled on the calling
// thread and at least one input requires a gradient.

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "slimunet/tensor.hpp"

namespace slimunet {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  /// Adds g into this node's gradient buffer.
  void accumulate(const Tensor<T>& g);
  /// Returns the gradient buffer, allocating zeros on first use.
  Tensor<T>& grad_buffer();
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  bool defined() const noexcept { return static_cast<bool>(node_); }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  void zero_grad() { node_->grad = Tensor<T>(); }
  /// Scalar value of a one-element variable.
  T item() const;

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Gradient recording switch, per thread.
bool grad_enabled() noexcept;

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Seeds d(root)/d(root) = 1 (root must be a scalar) and propagates to every
/// node reachable through recorded inputs.
template <class T>
void backward(const Var<T>& root);

/// Creates the output node of an op. `inputs` are only recorded when grad
/// recording is on and one of them requires a gradient; `fn` then runs during
/// backward with the output node (whose grad is populated).
template <class T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> fn);

}  // namespace slimunet
