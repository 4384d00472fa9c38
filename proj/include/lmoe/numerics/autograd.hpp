// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <string_view>
#include <vector>

#include "lmoe/numerics/tensor.hpp"

namespace lmoe {

template <typename T>
struct Node;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

/// One recorded operation. `backward_fn` reads `tensor.grad` and accumulates
/// into the grad slots of `inputs`. Leaves have no backward_fn.
template <typename T>
struct Node {
  Tensor<T> tensor;
  std::vector<NodePtr<T>> inputs;
  std::function<void(Node<T>&)> backward_fn;
  std::string_view op = "leaf";
};

/// Handle to a node of the compute graph.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr<T> node) : node_(std::move(node)) {}

  /// Graph leaf that owns `t`; gradients accumulate into it when requires_grad.
  static Var leaf(Tensor<T> t, bool requires_grad = true);
  /// Leaf that never receives gradient.
  static Var constant(Tensor<T> t);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->tensor.shape; }
  std::size_t size() const { return node_->tensor.values.size(); }
  const std::vector<T>& values() const { return node_->tensor.values; }
  std::vector<T>& mutable_values() { return node_->tensor.values; }
  const std::vector<T>& grad() const { return node_->tensor.grad; }
  bool requires_grad() const { return node_->tensor.requires_grad; }
  T item() const;

  Tensor<T>& tensor() const { return node_->tensor; }
  Node<T>* node() const { return node_.get(); }
  const NodePtr<T>& ptr() const { return node_; }

 private:
  NodePtr<T> node_;
};

/// Whether new operations record their inputs for backward.
bool grad_enabled();

/// Disables graph recording for its lifetime (evaluation, teacher passes).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Creates the result node of an operation. Inputs and the backward rule are
/// only retained when grad mode is on and at least one input requires grad.
template <typename T>
Var<T> make_op(std::string_view op, Tensor<T> result, std::vector<Var<T>> inputs,
               std::function<void(Node<T>&)> backward_fn);

/// Nodes reachable from `root` that require grad, inputs before consumers.
template <typename T>
std::vector<Node<T>*> topological_order(const Var<T>& root);

/// Reverse-mode sweep from a scalar loss. Each reachable node's backward rule
/// runs exactly once; gradients accumulate additively. Returns the number of
/// nodes visited.
template <typename T>
std::size_t backward(const Var<T>& loss);

extern template class Var<float>;
extern template class Var<double>;

}  // namespace lmoe
