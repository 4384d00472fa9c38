// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmoe/numerics/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace lmoe {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::string precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& name) {
  if (name == "f32") return Precision::f32;
  if (name == "f64") return Precision::f64;
  throw ConfigError("unknown precision '" + name + "' (expected f32 or f64)");
}

template <typename T>
Tensor<T>::Tensor(Shape s) : shape(std::move(s)), values(numel(shape), T(0)) {}

template <typename T>
Tensor<T>::Tensor(Shape s, std::vector<T> v) : shape(std::move(s)), values(std::move(v)) {
  check_invariants();
}

template <typename T>
std::vector<T>& Tensor<T>::grad_slot() {
  if (grad.size() != values.size()) grad.assign(values.size(), T(0));
  return grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  grad.assign(values.size(), T(0));
}

template <typename T>
void Tensor<T>::check_invariants() const {
  if (numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " holds " + std::to_string(numel(shape)) +
                     " elements but " + std::to_string(values.size()) + " values were given");
  }
  if (!grad.empty() && grad.size() != values.size()) {
    throw ShapeError("tensor: grad length " + std::to_string(grad.size()) + " does not match shape " +
                     shape_str(shape));
  }
}

template struct Tensor<float>;
template struct Tensor<double>;

}  // namespace lmoe
