// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lmoe/model/config.hpp"

namespace lmoe {

enum class FreezeMode { none, experts_only, gatings_only, both };
enum class SourcePolicy { modulo, seeded_uniform };
enum class TeacherMode { snapshot, live_old_experts };
enum class StrategyKind { lifelong_moe, naive_sequential, l2_anchor, memory_replay, joint_oracle };

std::string to_string(FreezeMode m);
std::string to_string(SourcePolicy p);
std::string to_string(TeacherMode m);
std::string to_string(StrategyKind k);
FreezeMode parse_freeze_mode(const std::string& s);
SourcePolicy parse_source_policy(const std::string& s);
TeacherMode parse_teacher_mode(const std::string& s);
StrategyKind parse_strategy_kind(const std::string& s);

struct ExpansionSchedule {
  std::vector<int> experts_per_phase;  // one entry per phase, non-decreasing
  SourcePolicy policy = SourcePolicy::modulo;
  double noise_sigma = 0.01;  // applied to copied gating rows only

  bool operator==(const ExpansionSchedule&) const = default;
};

struct DistillConfig {
  double lambda = 1.0;
  TeacherMode teacher = TeacherMode::snapshot;
  double temperature = 1.0;

  bool operator==(const DistillConfig&) const = default;
};

/// Which lifelong method a run uses. Fields that do not belong to `kind` are
/// ignored (and keep their defaults in the serialised form).
struct StrategyConfig {
  StrategyKind kind = StrategyKind::naive_sequential;
  ExpansionSchedule schedule;              // lifelong_moe
  FreezeMode freeze = FreezeMode::none;    // lifelong_moe
  DistillConfig distill;                   // lifelong_moe
  double l2_lambda = 1.0;                  // l2_anchor
  double historic_fraction = 0.25;         // memory_replay
  std::vector<double> mixture;             // joint_oracle, one weight per phase

  /// Distillation weight at `phase` (0 outside lifelong_moe and in phase 0).
  double lambda_at(int phase) const;
  /// Experts per MoE layer during `phase`; `initial` when the strategy does not expand.
  int experts_at(int phase, int initial) const;

  /// Every invariant violation given the number of phases and the model.
  std::vector<std::string> validate(std::size_t phases, const ModelConfig& model,
                                    const std::string& prefix = "strategy") const;
  /// Legal but suspicious settings (λ > 1 is known to destabilise training).
  std::vector<std::string> warnings(const std::string& prefix = "strategy") const;

  bool operator==(const StrategyConfig&) const = default;
};

void to_json(nlohmann::json& j, const StrategyConfig& s);
void from_json(const nlohmann::json& j, StrategyConfig& s);

}  // namespace lmoe
