// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lmoe/numerics/parameter.hpp"

namespace lmoe {

struct LrSchedule {
  double lr0 = 0.01;
  long warmup_steps = 200;  // constant prefix

  bool operator==(const LrSchedule&) const = default;
};

/// lr0 up to the warmup, then lr0·sqrt(warmup/t). Throws ConfigError for t < 1.
double lr_at(long t, const LrSchedule& schedule);

struct AdafactorOptions {
  double eps1 = 1e-30;
  double clip = 1.0;  // RMS threshold d
  double beta2_cap = 0.99;
  double decay_exponent = 0.8;
};

/// min(cap, 1 − t^−decay); 0 at t = 1.
double adafactor_beta2(long t, const AdafactorOptions& o = {});

/// Second-moment state of one parameter. Rank-2 parameters keep row and
/// column accumulators, everything else a full accumulator.
template <typename T>
struct AdafactorSlot {
  long t = 0;
  Shape shape;
  std::vector<T> row;
  std::vector<T> col;
  std::vector<T> full;

  bool factored() const { return shape.size() == 2; }
};

/// Adafactor without momentum, with update clipping by RMS.
template <typename T>
class Adafactor {
 public:
  explicit Adafactor(AdafactorOptions options = {}) : options_(options) {}

  /// Updates every trainable parameter. When any trainable gradient is not
  /// finite nothing is touched and NumericError names the parameter.
  void step(const std::vector<Parameter<T>*>& params, double lr);
  /// Single-parameter update; frozen parameters are skipped.
  void update(Parameter<T>& p, double lr);

  const AdafactorSlot<T>* slot(const std::string& name) const;
  std::size_t size() const { return slots_.size(); }
  void release(const std::string& name) { slots_.erase(name); }
  /// Drops the state of every non-trainable parameter in `params`.
  void release_frozen(const std::vector<Parameter<T>*>& params);
  void clear() { slots_.clear(); }
  const AdafactorOptions& options() const { return options_; }

  /// Writes one blob per accumulator under `dir` and returns the index.
  nlohmann::json save(const std::filesystem::path& dir) const;
  void load(const std::filesystem::path& dir, const nlohmann::json& index);

 private:
  AdafactorOptions options_;
  std::map<std::string, AdafactorSlot<T>> slots_;
};

extern template class Adafactor<float>;
extern template class Adafactor<double>;

}  // namespace lmoe
