// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmoe/lifelong/strategy.hpp"

#include <cmath>
#include <numeric>

#include "lmoe/common/error.hpp"

namespace lmoe {

std::string to_string(FreezeMode m) {
  switch (m) {
    case FreezeMode::none: return "none";
    case FreezeMode::experts_only: return "experts_only";
    case FreezeMode::gatings_only: return "gatings_only";
    case FreezeMode::both: return "both";
  }
  return "none";
}

std::string to_string(SourcePolicy p) { return p == SourcePolicy::modulo ? "modulo" : "seeded_uniform"; }
std::string to_string(TeacherMode m) { return m == TeacherMode::snapshot ? "snapshot" : "live_old_experts"; }

std::string to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::lifelong_moe: return "lifelong_moe";
    case StrategyKind::naive_sequential: return "naive_sequential";
    case StrategyKind::l2_anchor: return "l2_anchor";
    case StrategyKind::memory_replay: return "memory_replay";
    case StrategyKind::joint_oracle: return "joint_oracle";
  }
  return "naive_sequential";
}

FreezeMode parse_freeze_mode(const std::string& s) {
  for (auto m : {FreezeMode::none, FreezeMode::experts_only, FreezeMode::gatings_only, FreezeMode::both})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown freeze mode '" + s + "' (expected none, experts_only, gatings_only or both)");
}

SourcePolicy parse_source_policy(const std::string& s) {
  if (s == "modulo") return SourcePolicy::modulo;
  if (s == "seeded_uniform") return SourcePolicy::seeded_uniform;
  throw ConfigError("unknown source policy '" + s + "' (expected modulo or seeded_uniform)");
}

TeacherMode parse_teacher_mode(const std::string& s) {
  if (s == "snapshot") return TeacherMode::snapshot;
  if (s == "live_old_experts") return TeacherMode::live_old_experts;
  throw ConfigError("unknown teacher mode '" + s + "' (expected snapshot or live_old_experts)");
}

StrategyKind parse_strategy_kind(const std::string& s) {
  for (auto k : {StrategyKind::lifelong_moe, StrategyKind::naive_sequential, StrategyKind::l2_anchor,
                 StrategyKind::memory_replay, StrategyKind::joint_oracle})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown strategy '" + s +
                    "' (expected lifelong_moe, naive_sequential, l2_anchor, memory_replay or joint_oracle)");
}

double StrategyConfig::lambda_at(int phase) const {
  return kind == StrategyKind::lifelong_moe && phase >= 1 ? distill.lambda : 0.0;
}

int StrategyConfig::experts_at(int phase, int initial) const {
  if (kind != StrategyKind::lifelong_moe || schedule.experts_per_phase.empty()) return initial;
  const auto i = std::min<std::size_t>(static_cast<std::size_t>(phase), schedule.experts_per_phase.size() - 1);
  return schedule.experts_per_phase[i];
}

std::vector<std::string> StrategyConfig::validate(std::size_t phases, const ModelConfig& model,
                                                  const std::string& prefix) const {
  std::vector<std::string> errs;
  if (kind == StrategyKind::lifelong_moe) {
    const auto& e = schedule.experts_per_phase;
    if (!model.has_moe()) errs.push_back(prefix + ": lifelong_moe needs a model with MoE blocks");
    if (e.size() != phases) {
      errs.push_back(prefix + ".schedule.experts_per_phase has " + std::to_string(e.size()) + " entries for " +
                     std::to_string(phases) + " phases");
    }
    if (!e.empty() && e.front() != model.experts) {
      errs.push_back(prefix + ".schedule.experts_per_phase[0] = " + std::to_string(e.front()) +
                     " must equal model.experts = " + std::to_string(model.experts));
    }
    for (std::size_t i = 1; i < e.size(); ++i) {
      if (e[i] < e[i - 1]) {
        errs.push_back(prefix + ".schedule.experts_per_phase must be non-decreasing (" + std::to_string(e[i - 1]) +
                       " then " + std::to_string(e[i]) + ")");
      }
    }
    if (!(schedule.noise_sigma >= 0.0) || !std::isfinite(schedule.noise_sigma))
      errs.push_back(prefix + ".schedule.noise_sigma must be a finite value >= 0");
    if (!(distill.lambda >= 0.0) || !std::isfinite(distill.lambda))
      errs.push_back(prefix + ".distill.lambda must be a finite value >= 0");
    if (!(distill.temperature > 0.0) || !std::isfinite(distill.temperature))
      errs.push_back(prefix + ".distill.temperature must be positive");
  }
  if (kind == StrategyKind::l2_anchor && (!(l2_lambda >= 0.0) || !std::isfinite(l2_lambda)))
    errs.push_back(prefix + ".l2_lambda must be a finite value >= 0");
  if (kind == StrategyKind::memory_replay && !(historic_fraction > 0.0 && historic_fraction < 1.0))
    errs.push_back(prefix + ".historic_fraction must lie in (0, 1)");
  if (kind == StrategyKind::joint_oracle) {
    if (mixture.size() != phases) {
      errs.push_back(prefix + ".mixture has " + std::to_string(mixture.size()) + " weights for " +
                     std::to_string(phases) + " phases");
    }
    bool positive = true;
    for (double w : mixture) positive = positive && w > 0.0 && std::isfinite(w);
    if (!positive) errs.push_back(prefix + ".mixture weights must be positive");
    const double total = std::accumulate(mixture.begin(), mixture.end(), 0.0);
    if (positive && !mixture.empty() && std::abs(total - 1.0) > 1e-9)
      errs.push_back(prefix + ".mixture weights sum to " + std::to_string(total) + ", expected 1");
  }
  return errs;
}

std::vector<std::string> StrategyConfig::warnings(const std::string& prefix) const {
  std::vector<std::string> w;
  if (kind == StrategyKind::lifelong_moe && distill.lambda > 1.0)
    w.push_back(prefix + ".distill.lambda = " + std::to_string(distill.lambda) + " > 1 tends to destabilise training");
  return w;
}

void to_json(nlohmann::json& j, const StrategyConfig& s) {
  j = nlohmann::json{{"kind", to_string(s.kind)}};
  switch (s.kind) {
    case StrategyKind::lifelong_moe:
      j["schedule"] = {{"experts_per_phase", s.schedule.experts_per_phase},
                       {"policy", to_string(s.schedule.policy)},
                       {"noise_sigma", s.schedule.noise_sigma}};
      j["freeze"] = to_string(s.freeze);
      j["distill"] = {{"lambda", s.distill.lambda},
                      {"teacher", to_string(s.distill.teacher)},
                      {"temperature", s.distill.temperature}};
      break;
    case StrategyKind::l2_anchor: j["l2_lambda"] = s.l2_lambda; break;
    case StrategyKind::memory_replay: j["historic_fraction"] = s.historic_fraction; break;
    case StrategyKind::joint_oracle: j["mixture"] = s.mixture; break;
    case StrategyKind::naive_sequential: break;
  }
}

void from_json(const nlohmann::json& j, StrategyConfig& s) {
  s = StrategyConfig{};
  s.kind = parse_strategy_kind(j.at("kind").get<std::string>());
  if (j.contains("schedule")) {
    const auto& sc = j["schedule"];
    s.schedule.experts_per_phase = sc.value("experts_per_phase", std::vector<int>{});
    s.schedule.policy = parse_source_policy(sc.value("policy", std::string("modulo")));
    s.schedule.noise_sigma = sc.value("noise_sigma", 0.01);
  }
  s.freeze = parse_freeze_mode(j.value("freeze", std::string("none")));
  if (j.contains("distill")) {
    const auto& d = j["distill"];
    s.distill.lambda = d.value("lambda", 1.0);
    s.distill.teacher = parse_teacher_mode(d.value("teacher", std::string("snapshot")));
    s.distill.temperature = d.value("temperature", 1.0);
  }
  s.l2_lambda = j.value("l2_lambda", 1.0);
  s.historic_fraction = j.value("historic_fraction", 0.25);
  s.mixture = j.value("mixture", std::vector<double>{});
}

}  // namespace lmoe
