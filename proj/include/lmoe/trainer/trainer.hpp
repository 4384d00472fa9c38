// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lmoe/data/data.hpp"
#include "lmoe/evalkit/evalkit.hpp"
#include "lmoe/lifelong/lifelong.hpp"
#include "lmoe/model/transformer.hpp"
#include "lmoe/trainer/experiment.hpp"
#include "lmoe/trainer/optimizer.hpp"

namespace lmoe {

/// Aborted steps tolerated per run before training gives up.
inline constexpr int kAbortBudget = 3;

struct TrainEvent {
  long step = 0;
  int phase = 0;
  std::string message;
};

/// Sequential phase-by-phase training of one experiment.
///
/// Run directory layout:
///   config.json           the experiment config
///   metrics.jsonl         one record per (eval event, distribution)
///   report.csv            plot-ready curves
///   summary.csv           forgetting table
///   checkpoints/phase_N/  model, optimizer and snapshot after phase N
///   events.log            aborted steps and warnings
///   error.json            only after a failed run
template <typename T>
class Trainer {
 public:
  /// Fresh run. Throws ConfigError listing every invalid field.
  Trainer(ExperimentConfig config, std::filesystem::path run_dir);

  /// Continues from a checkpoint written by save_checkpoint(). Metrics
  /// recorded before the checkpoint are restored into run_dir.
  static Trainer resume(const std::filesystem::path& checkpoint, const std::filesystem::path& run_dir);

  Trainer(Trainer&&) noexcept = default;
  Trainer& operator=(Trainer&&) noexcept = default;

  /// Snapshot, expansion, freezing and teacher for the current phase.
  /// Called implicitly by train_step(); a no-op once the phase has begun.
  void begin_phase();
  /// One optimizer step on the next batch of the current phase.
  LossBreakdown train_step();
  /// Remaining steps of the current phase, evaluations, phase-end checkpoint.
  void run_phase();
  /// All remaining phases; writes the reports and returns the forgetting report.
  ForgettingReport run();

  /// Evaluates every distribution and appends the records.
  void record_eval();
  void save_checkpoint(const std::filesystem::path& dir) const;

  const ExperimentConfig& config() const { return config_; }
  const std::filesystem::path& run_dir() const { return run_dir_; }
  TransformerLM<T>& model() { return *model_; }
  const TransformerLM<T>& model() const { return *model_; }
  const TransformerLM<T>* snapshot() const { return snapshot_.get(); }
  const Adafactor<T>& optimizer() const { return optimizer_; }
  const DataStream& stream() const { return *stream_; }
  int phase() const { return phase_; }
  std::size_t step_in_phase() const { return step_; }
  long global_step() const { return global_step_; }
  bool finished() const { return phase_ >= static_cast<int>(config_.plan.phases.size()); }
  const std::vector<MetricsRecord>& records() const { return records_; }
  const std::vector<TrainEvent>& events() const { return events_; }
  const LossBreakdown& last_breakdown() const { return last_; }
  /// Wall time of every train_step() per phase, in seconds.
  const std::map<int, std::vector<double>>& step_seconds() const { return step_seconds_; }
  /// Distribution id → the phase that trains on it.
  std::map<std::string, int> own_phases() const;

  /// Called after each completed step (tests and progress output).
  std::function<void(const Trainer&, const LossBreakdown&)> on_step;

 private:
  Trainer() = default;
  void init_common();
  void abort_step(const std::string& why);
  void append_metrics(const MetricsRecord& r) const;
  void log_event(const TrainEvent& e) const;

  ExperimentConfig config_;
  std::filesystem::path run_dir_;
  std::unique_ptr<TransformerLM<T>> model_;
  std::unique_ptr<TransformerLM<T>> snapshot_;
  std::optional<Teacher<T>> teacher_;
  Adafactor<T> optimizer_;
  std::unique_ptr<DataStream> stream_;
  std::vector<std::vector<Batch>> eval_sets_;

  int phase_ = 0;
  std::size_t step_ = 0;
  long global_step_ = 0;
  bool phase_started_ = false;
  int aborted_ = 0;
  long last_eval_step_ = -1;
  LossBreakdown last_;
  std::vector<MetricsRecord> records_;
  std::vector<TrainEvent> events_;
  std::map<int, std::vector<double>> step_seconds_;
};

extern template class Trainer<float>;
extern template class Trainer<double>;

/// Runs `config` at its configured precision into `run_dir`.
ForgettingReport run_experiment(const ExperimentConfig& config, const std::filesystem::path& run_dir);

/// Raises the allocator's mmap and trim thresholds so per-step activations
/// are recycled from the heap instead of mapped and unmapped every step.
void tune_allocator();

/// Runs independent jobs on up to `workers` threads; the first exception is
/// rethrown after all jobs finish.
void run_parallel(const std::vector<std::function<void()>>& jobs, unsigned workers);

}  // namespace lmoe
