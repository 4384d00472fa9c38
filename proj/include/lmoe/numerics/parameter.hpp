// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "lmoe/numerics/autograd.hpp"

namespace lmoe {

/// A named trainable leaf. `origin_phase` is the distribution phase in which
/// the parameter was created; together with the name it decides whether the
/// parameter is shared (dense), old (created before the current phase) or
/// new. `trainable` only gates optimizer updates: gradients always flow.
template <typename T>
struct Parameter {
  std::string name;
  Var<T> var;
  bool trainable = true;
  int origin_phase = 0;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> init, int phase = 0)
      : name(std::move(n)), var(Var<T>::leaf(std::move(init), true)), origin_phase(phase) {}

  Tensor<T>& tensor() const { return var.tensor(); }
  const Shape& shape() const { return var.shape(); }
  std::size_t size() const { return var.size(); }
};

template <typename T>
void zero_grads(const std::vector<Parameter<T>*>& params) {
  for (auto* p : params) p->tensor().zero_grad();
}

}  // namespace lmoe
