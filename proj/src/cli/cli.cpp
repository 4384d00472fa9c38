// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmoe/cli/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "lmoe/evalkit/evalkit.hpp"
#include "lmoe/model/checkpoint.hpp"
#include "lmoe/trainer/trainer.hpp"

namespace lmoe {

namespace fs = std::filesystem;

namespace {

struct TrainArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

struct EvalArgs {
  std::string checkpoint;
  std::string dist;
  std::optional<std::uint64_t> seed;
  std::size_t batches = 50;
};

template <typename T>
int train_as(const ExperimentConfig& cfg, std::ostream& out, std::ostream& err) {
  Trainer<T> trainer(cfg, cfg.out_dir);
  const std::size_t every = cfg.trainer.eval_interval;
  trainer.on_step = [&err, every](const Trainer<T>& t, const LossBreakdown& b) {
    if (t.step_in_phase() % every != 0) return;
    char line[200];
    std::snprintf(line, sizeof(line), "phase %d step %zu loss %.4f (perp %.4f kl %.4f l2 %.4f aux %.4f)\n", t.phase(),
                  t.step_in_phase(), b.total, b.perp, b.kl, b.l2, b.aux);
    err << line << std::flush;
  };
  const auto report = trainer.run();
  out << forgetting_table(report);
  out << "run directory: " << cfg.out_dir << "\n";
  return kExitOk;
}

int cmd_train(const TrainArgs& a, const std::optional<std::string>& precision, std::ostream& out,
              std::ostream& err) {
  ExperimentConfig cfg;
  try {
    cfg = load_experiment(a.config);
    if (a.seed) cfg.reseed(*a.seed);
    if (!a.out.empty()) cfg.out_dir = a.out;
    if (precision) cfg.trainer.precision = parse_precision(*precision);
  } catch (const ConfigError& e) {
    err << "invalid config " << a.config << ":\n" << e.what() << "\n";
    return kExitUsage;
  }
  for (const auto& w : cfg.warnings()) err << "warning: " << w << "\n";
  if (cfg.trainer.precision == Precision::f64) return train_as<double>(cfg, out, err);
  return train_as<float>(cfg, out, err);
}

DistributionSpec resolve_dist(const std::string& name) {
  if (name == "A" || name == "B" || name == "C") return default_distribution(name);
  std::ifstream in(name);
  if (!in) throw ConfigError("--dist: '" + name + "' is neither A, B, C nor a readable spec file");
  nlohmann::json j;
  try {
    in >> j;
    return j.get<DistributionSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("--dist: " + name + ": " + e.what());
  }
}

template <typename T>
int eval_as(const EvalArgs& a, std::ostream& out) {
  const auto spec = resolve_dist(a.dist);
  auto errs = spec.validate("dist");
  if (!errs.empty()) throw ConfigError(errs.front());
  const auto manifest = read_manifest(a.checkpoint);
  const auto model = load_model<T>(a.checkpoint);

  StreamPlan plan;
  std::uint64_t seed = 1;
  if (manifest.contains("trainer")) {
    const auto cfg = manifest["trainer"]["config"].get<ExperimentConfig>();
    plan = cfg.plan;
    seed = cfg.seeds.data;
  } else {
    plan.seq_len = static_cast<std::size_t>(model.config().max_seq_len);
  }
  if (a.seed) seed = *a.seed;
  // Reuse the run's stream when the distribution is part of it so the held-out
  // set matches the in-run evaluation.
  int index = -1;
  for (std::size_t p = 0; p < plan.phases.size(); ++p)
    if (plan.phases[p] == spec) index = static_cast<int>(p);
  if (index < 0) {
    plan.phases = {spec};
    index = 0;
  }
  DataStream stream(plan, seed);
  const int dist = stream.phase_distribution(index);
  const auto res = evaluate(model, stream.eval_set(dist, a.batches));

  nlohmann::ordered_json j;
  j["checkpoint"] = a.checkpoint;
  j["dist"] = spec.id;
  j["seed"] = seed;
  j["batches"] = a.batches;
  j["tokens"] = res.tokens;
  j["ppl"] = res.ppl;
  j["acc"] = res.acc;
  const fs::path file = fs::path(a.checkpoint) / ("eval_" + spec.id + ".json");
  std::ofstream f(file, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + file.string());
  f << j.dump(2) << "\n";
  out << "dist " << spec.id << " ppl " << format_g6(res.ppl) << " acc " << format_g6(res.acc) << "\n";
  return kExitOk;
}

int cmd_eval(const EvalArgs& a, const std::optional<std::string>& precision, std::ostream& out) {
  const auto p = precision ? parse_precision(*precision) : Precision::f32;
  return p == Precision::f64 ? eval_as<double>(a, out) : eval_as<float>(a, out);
}

std::map<std::string, int> own_phases_of(const fs::path& run_dir) {
  std::map<std::string, int> own;
  try {
    const auto cfg = load_experiment(run_dir / "config.json");
    for (std::size_t p = 0; p < cfg.plan.phases.size(); ++p) own.emplace(cfg.plan.phases[p].id, static_cast<int>(p));
  } catch (const ConfigError&) {
  }
  return own;
}

ForgettingReport report_one(const fs::path& run_dir, std::ostream& err) {
  auto parsed = read_metrics(run_dir / "metrics.jsonl");
  if (parsed.skipped > 0)
    err << "warning: skipped " << parsed.skipped << " corrupt line(s) in " << (run_dir / "metrics.jsonl").string() << "\n";
  if (parsed.records.empty()) throw std::runtime_error((run_dir / "metrics.jsonl").string() + " holds no records");
  auto report = build_report(parsed.records, own_phases_of(run_dir));
  std::ofstream f(run_dir / "summary.csv", std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + (run_dir / "summary.csv").string());
  f << summary_csv(report);
  return report;
}

int cmd_report(const std::string& dir, std::ostream& out, std::ostream& err) {
  const fs::path run_dir(dir);
  if (fs::exists(run_dir / "metrics.jsonl")) {
    out << forgetting_table(report_one(run_dir, err));
    return kExitOk;
  }
  if (!fs::is_directory(run_dir)) throw std::runtime_error(dir + " is not a run directory");
  std::vector<fs::path> runs;
  for (const auto& e : fs::directory_iterator(run_dir))
    if (e.is_directory() && fs::exists(e.path() / "metrics.jsonl")) runs.push_back(e.path());
  if (runs.empty()) throw std::runtime_error("no metrics.jsonl in " + dir + " or its subdirectories");
  std::sort(runs.begin(), runs.end());
  std::vector<ComparisonRow> rows;
  for (const auto& r : runs) {
    const auto more = comparison_rows(r.filename().string(), report_one(r, err));
    rows.insert(rows.end(), more.begin(), more.end());
  }
  const auto csv = comparison_csv(rows);
  std::ofstream f(run_dir / "comparison.csv", std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + (run_dir / "comparison.csv").string());
  f << csv;
  char line[200];
  std::snprintf(line, sizeof(line), "%-24s %-6s %10s %10s %10s\n", "run", "dist", "own_ppl", "final_ppl", "drop%");
  out << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%-24s %-6s %10.4f %10.4f %10.2f\n", r.run.c_str(), r.dist.c_str(), r.own_ppl,
                  r.final_ppl, r.ppl_drop_pct);
    out << line;
  }
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Lifelong mixture-of-experts language model pretraining", "lmoe"};
  app.require_subcommand(1);
  std::optional<std::string> precision;
  app.add_option("--precision", precision, "Numeric precision")->check(CLI::IsMember({"f32", "f64"}));

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Run every phase of an experiment config");
  train->add_option("--config", ta.config, "Experiment config (JSON)")->required();
  train->add_option("--out", ta.out, "Run directory (overrides out_dir)");
  train->add_option("--seed", ta.seed, "Derive all seeds from N");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on one distribution");
  eval->add_option("--checkpoint", ea.checkpoint, "Checkpoint directory")->required();
  eval->add_option("--dist", ea.dist, "A, B, C or a distribution spec file")->required();
  eval->add_option("--seed", ea.seed, "Held-out data seed");
  eval->add_option("--batches", ea.batches, "Held-out batches")->check(CLI::PositiveNumber);

  std::string run_dir;
  auto* report = app.add_subcommand("report", "Forgetting report of a run, or comparison of a directory of runs");
  report->add_option("RUN_DIR", run_dir, "Run directory or parent of run directories")->required();

  for (auto* sub : {train, eval, report})
    sub->add_option("--precision", precision, "Numeric precision")->check(CLI::IsMember({"f32", "f64"}));

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train->parsed()) return cmd_train(ta, precision, out, err);
    if (eval->parsed()) return cmd_eval(ea, precision, out);
    return cmd_report(run_dir, out, err);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace lmoe
