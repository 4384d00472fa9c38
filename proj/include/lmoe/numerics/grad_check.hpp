// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lmoe/numerics/parameter.hpp"

namespace lmoe {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;
  double max_rel_error = 0.0;
  std::string worst;
  bool passed = false;
};

/// Compares backward() against central finite differences for every element
/// of every listed parameter.
///
/// The relative error of a parameter is
///   max_i |analytic_i − numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|, floor)
/// i.e. the worst element error normalised by that parameter's gradient
/// scale. `loss_fn` must be deterministic and return a scalar; parameter
/// values are restored bitwise afterwards. Throws NumericError naming the
/// parameter when the loss or a gradient is non-finite.
template <typename T>
GradCheckReport grad_check(const std::function<Var<T>()>& loss_fn, const std::vector<Parameter<T>*>& params,
                           double tolerance, double step = 1e-4, double floor = 1e-7);

}  // namespace lmoe
