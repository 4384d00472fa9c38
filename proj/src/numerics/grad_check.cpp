// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmoe/numerics/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace lmoe {

namespace {

template <typename T>
double eval_loss(const std::function<Var<T>()>& loss_fn, const std::string& name) {
  NoGradGuard guard;
  const double v = static_cast<double>(loss_fn().item());
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss while perturbing " + name);
  return v;
}

}  // namespace

template <typename T>
GradCheckReport grad_check(const std::function<Var<T>()>& loss_fn, const std::vector<Parameter<T>*>& params,
                           double tolerance, double step, double floor) {
  zero_grads(params);
  {
    auto loss = loss_fn();
    if (!std::isfinite(static_cast<double>(loss.item()))) throw NumericError("grad_check: non-finite loss");
    backward(loss);
  }
  GradCheckReport report;
  report.tolerance = tolerance;
  for (auto* p : params) {
    auto& t = p->tensor();
    const std::vector<T> analytic = t.grad_slot();
    double max_diff = 0.0, max_a = 0.0, max_n = 0.0;
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      const double a = static_cast<double>(analytic[i]);
      if (!std::isfinite(a)) throw NumericError("grad_check: non-finite gradient in parameter " + p->name);
      const T saved = t.values[i];
      t.values[i] = static_cast<T>(static_cast<double>(saved) + step);
      const double up = eval_loss(loss_fn, p->name);
      t.values[i] = static_cast<T>(static_cast<double>(saved) - step);
      const double down = eval_loss(loss_fn, p->name);
      t.values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      max_diff = std::max(max_diff, std::abs(a - numeric));
      max_a = std::max(max_a, std::abs(a));
      max_n = std::max(max_n, std::abs(numeric));
    }
    GradCheckEntry e{p->name, max_diff / std::max({max_a, max_n, floor}), max_a};
    if (e.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = e.max_rel_error;
      report.worst = e.name;
    }
    report.entries.push_back(std::move(e));
  }
  report.passed = report.max_rel_error <= tolerance;
  return report;
}

template GradCheckReport grad_check<float>(const std::function<Var<float>()>&, const std::vector<Parameter<float>*>&,
                                           double, double, double);
template GradCheckReport grad_check<double>(const std::function<Var<double>()>&,
                                            const std::vector<Parameter<double>*>&, double, double, double);

}  // namespace lmoe
