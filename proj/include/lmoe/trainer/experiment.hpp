// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lmoe/data/data.hpp"
#include "lmoe/lifelong/strategy.hpp"
#include "lmoe/model/config.hpp"
#include "lmoe/trainer/optimizer.hpp"

namespace lmoe {

struct TrainerConfig {
  LrSchedule lr;
  std::size_t eval_interval = 100;
  std::size_t eval_batches = 50;
  Precision precision = Precision::f32;
  bool reset_optimizer = false;  // drop all optimizer state at each phase start
  bool save_checkpoints = true;  // phase-end checkpoints under checkpoints/

  bool operator==(const TrainerConfig&) const = default;
};

struct Seeds {
  std::uint64_t data = 1;
  std::uint64_t init = 1;
  std::uint64_t noise = 1;

  bool operator==(const Seeds&) const = default;
};

/// Everything that determines a run.
struct ExperimentConfig {
  std::string name = "run";
  ModelConfig model;
  StreamPlan plan;
  StrategyConfig strategy;
  TrainerConfig trainer;
  Seeds seeds;
  ReplayMode replay_mode = ReplayMode::regenerate;
  std::string out_dir = "runs/run";

  /// Every violated invariant across all sections, field-prefixed.
  std::vector<std::string> validate() const;
  std::vector<std::string> warnings() const;
  /// Replaces every seed with one derived from `seed`.
  void reseed(std::uint64_t seed);

  bool operator==(const ExperimentConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainerConfig& c);
void from_json(const nlohmann::json& j, TrainerConfig& c);
void to_json(nlohmann::json& j, const Seeds& s);
void from_json(const nlohmann::json& j, Seeds& s);
void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Parses and validates; ConfigError lists every problem, one per line.
ExperimentConfig load_experiment(const std::filesystem::path& path);
ExperimentConfig parse_experiment(const std::string& text);
std::string dump_experiment(const ExperimentConfig& c);

}  // namespace lmoe
