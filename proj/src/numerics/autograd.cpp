// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmoe/numerics/autograd.hpp"

#include <unordered_set>
#include <utility>

namespace lmoe {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
Var<T> Var<T>::leaf(Tensor<T> t, bool requires_grad) {
  auto n = std::make_shared<Node<T>>();
  t.requires_grad = requires_grad;
  t.check_invariants();
  n->tensor = std::move(t);
  return Var<T>(std::move(n));
}

template <typename T>
Var<T> Var<T>::constant(Tensor<T> t) {
  return leaf(std::move(t), false);
}

template <typename T>
T Var<T>::item() const {
  if (node_->tensor.values.size() != 1) {
    throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  }
  return node_->tensor.values[0];
}

template <typename T>
Var<T> make_op(std::string_view op, Tensor<T> result, std::vector<Var<T>> inputs,
               std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->op = op;
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  result.requires_grad = needs;
  result.grad.clear();
  n->tensor = std::move(result);
  if (needs) {
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) n->inputs.push_back(in.ptr());
    n->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(n));
}

template <typename T>
std::vector<Node<T>*> topological_order(const Var<T>& root) {
  std::vector<Node<T>*> order;
  if (!root.defined() || !root.requires_grad()) return order;
  std::unordered_set<Node<T>*> seen;
  // Iterative post-order DFS; a frame is (node, next input index).
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->tensor.requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

template <typename T>
std::size_t backward(const Var<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  auto order = topological_order(loss);
  if (order.empty()) return 0;
  loss.tensor().grad_slot()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->tensor.has_grad()) n->backward_fn(*n);
  }
  return order.size();
}

template class Var<float>;
template class Var<double>;

#define LMOE_INSTANTIATE(T)                                                                           \
  template Var<T> make_op<T>(std::string_view, Tensor<T>, std::vector<Var<T>>,                     \
                             std::function<void(Node<T>&)>);                                         \
  template std::vector<Node<T>*> topological_order<T>(const Var<T>&);                               \
  template std::size_t backward<T>(const Var<T>&);

LMOE_INSTANTIATE(float)
LMOE_INSTANTIATE(double)
#undef LMOE_INSTANTIATE

}  // namespace lmoe
