// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "lmoe/common/error.hpp"

namespace lmoe {

using Shape = std::vector<std::size_t>;

enum class Precision { f32, f64 };

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);
std::string precision_name(Precision p);
Precision parse_precision(const std::string& name);

/// Dense row-major array with an optional gradient slot of identical shape.
///
/// An empty shape denotes a scalar (one element). `grad` is either empty
/// (no gradient has been accumulated yet) or exactly `values.size()` long.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Shape s);
  Tensor(Shape s, std::vector<T> v);

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  std::size_t size() const { return values.size(); }
  bool has_grad() const { return !grad.empty(); }

  /// Number of trailing-axis elements; 1 for scalars.
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
  /// Product of all leading axes.
  std::size_t rows() const { return cols() == 0 ? 0 : values.size() / cols(); }

  /// Grad slot, zero-filled on first access.
  std::vector<T>& grad_slot();
  void zero_grad();

  /// Throws ShapeError unless product(shape) == values.size() and grad is
  /// empty or the same length.
  void check_invariants() const;
};

extern template struct Tensor<float>;
extern template struct Tensor<double>;

}  // namespace lmoe
