// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmoe/trainer/experiment.hpp"

#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "lmoe/common/error.hpp"

namespace lmoe {

void to_json(nlohmann::json& j, const TrainerConfig& c) {
  j = nlohmann::json{{"lr0", c.lr.lr0},
                     {"warmup_steps", c.lr.warmup_steps},
                     {"eval_interval", c.eval_interval},
                     {"eval_batches", c.eval_batches},
                     {"precision", precision_name(c.precision)},
                     {"reset_optimizer", c.reset_optimizer},
                     {"save_checkpoints", c.save_checkpoints}};
}

void from_json(const nlohmann::json& j, TrainerConfig& c) {
  TrainerConfig d;
  c.lr.lr0 = j.value("lr0", d.lr.lr0);
  c.lr.warmup_steps = j.value("warmup_steps", d.lr.warmup_steps);
  c.eval_interval = j.value("eval_interval", d.eval_interval);
  c.eval_batches = j.value("eval_batches", d.eval_batches);
  c.precision = parse_precision(j.value("precision", precision_name(d.precision)));
  c.reset_optimizer = j.value("reset_optimizer", d.reset_optimizer);
  c.save_checkpoints = j.value("save_checkpoints", d.save_checkpoints);
}

void to_json(nlohmann::json& j, const Seeds& s) { j = nlohmann::json{{"data", s.data}, {"init", s.init}, {"noise", s.noise}}; }

void from_json(const nlohmann::json& j, Seeds& s) {
  Seeds d;
  s.data = j.value("data", d.data);
  s.init = j.value("init", d.init);
  s.noise = j.value("noise", d.noise);
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"name", c.name},         {"model", c.model},   {"plan", c.plan},
                     {"strategy", c.strategy}, {"trainer", c.trainer}, {"seeds", c.seeds},
                     {"replay_mode", to_string(c.replay_mode)}, {"out_dir", c.out_dir}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  ExperimentConfig d;
  c.name = j.value("name", d.name);
  c.model = j.value("model", d.model);
  c.plan = j.at("plan").get<StreamPlan>();
  c.strategy = j.value("strategy", d.strategy);
  c.trainer = j.value("trainer", d.trainer);
  c.seeds = j.value("seeds", d.seeds);
  c.replay_mode = parse_replay_mode(j.value("replay_mode", to_string(d.replay_mode)));
  c.out_dir = j.value("out_dir", d.out_dir);
}

std::vector<std::string> ExperimentConfig::validate() const {
  std::vector<std::string> errs = model.validate("model");
  auto add = [&](std::vector<std::string> more) { errs.insert(errs.end(), more.begin(), more.end()); };
  add(plan.validate(model.vocab_size, "plan"));
  add(strategy.validate(plan.phases.size(), model, "strategy"));
  if (static_cast<int>(plan.seq_len) > model.max_seq_len) {
    errs.push_back("plan.seq_len: " + std::to_string(plan.seq_len) + " exceeds model.max_seq_len " +
                   std::to_string(model.max_seq_len));
  }
  if (strategy.kind == StrategyKind::lifelong_moe && !strategy.schedule.experts_per_phase.empty() &&
      strategy.schedule.experts_per_phase.front() != model.experts) {
    errs.push_back("strategy.schedule.experts_per_phase[0]: " +
                   std::to_string(strategy.schedule.experts_per_phase.front()) + " differs from model.experts " +
                   std::to_string(model.experts));
  }
  if (!(trainer.lr.lr0 > 0.0)) errs.push_back("trainer.lr0: must be positive");
  if (trainer.lr.warmup_steps < 0) errs.push_back("trainer.warmup_steps: must be >= 0");
  if (trainer.eval_interval == 0) errs.push_back("trainer.eval_interval: must be >= 1");
  if (trainer.eval_batches == 0) errs.push_back("trainer.eval_batches: must be >= 1");
  if (name.empty()) errs.push_back("name: must not be empty");
  if (out_dir.empty()) errs.push_back("out_dir: must not be empty");
  return errs;
}

std::vector<std::string> ExperimentConfig::warnings() const { return strategy.warnings("strategy"); }

void ExperimentConfig::reseed(std::uint64_t seed) {
  std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  std::uint32_t out[6];
  ss.generate(out, out + 6);
  auto join = [&](int i) { return (std::uint64_t{out[i]} << 32) | out[i + 1]; };
  seeds.data = join(0);
  seeds.init = join(2);
  seeds.noise = join(4);
}

namespace {

void check_keys(const nlohmann::json& j, const std::string& where, const std::set<std::string>& allowed,
                std::vector<std::string>& errs) {
  if (!j.is_object()) {
    errs.push_back(where + ": expected an object");
    return;
  }
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) errs.push_back(where + "." + k + ": unknown key");
}

}  // namespace

ExperimentConfig parse_experiment(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  std::vector<std::string> errs;
  check_keys(j, "config", {"name", "model", "plan", "strategy", "trainer", "seeds", "replay_mode", "out_dir"}, errs);
  if (j.is_object()) {
    if (j.contains("trainer"))
      check_keys(j["trainer"], "trainer",
                 {"lr0", "warmup_steps", "eval_interval", "eval_batches", "precision", "reset_optimizer",
                  "save_checkpoints"},
                 errs);
    if (j.contains("seeds")) check_keys(j["seeds"], "seeds", {"data", "init", "noise"}, errs);
    if (!j.contains("plan")) errs.push_back("plan: missing");
  }
  ExperimentConfig c;
  if (errs.empty()) {
    try {
      c = j.get<ExperimentConfig>();
    } catch (const ConfigError& e) {
      errs.push_back(e.what());
    } catch (const nlohmann::json::exception& e) {
      errs.push_back(std::string("config: ") + e.what());
    }
  }
  if (errs.empty()) errs = c.validate();
  if (!errs.empty()) {
    std::ostringstream msg;
    for (std::size_t i = 0; i < errs.size(); ++i) msg << (i ? "\n" : "") << errs[i];
    throw ConfigError(msg.str());
  }
  return c;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment(ss.str());
}

std::string dump_experiment(const ExperimentConfig& c) { return nlohmann::json(c).dump(2) + "\n"; }

}  // namespace lmoe
