// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lmoe/data/data.hpp"
#include "lmoe/model/transformer.hpp"

namespace lmoe {

struct EvalResult {
  double ppl = 0.0;
  double acc = 0.0;
  double mean_nll = 0.0;
  std::size_t tokens = 0;
};

/// Perplexity exp(mean NLL) and next-token accuracy (argmax, ties to the
/// lower id) of `logits` [n × V] against `targets`, accumulated in double.
EvalResult score_logits(std::span<const double> logits, std::size_t vocab, std::span<const int> targets);

/// Evaluates every batch without recording a graph. Throws ConfigError on an empty set.
template <typename T>
EvalResult evaluate(const TransformerLM<T>& model, const std::vector<Batch>& set);

template <typename T>
double eval_perplexity(const TransformerLM<T>& model, const std::vector<Batch>& set) {
  return evaluate(model, set).ppl;
}

template <typename T>
double eval_next_token_acc(const TransformerLM<T>& model, const std::vector<Batch>& set) {
  return evaluate(model, set).acc;
}

/// Percentage change from `best` to `later`; negative means degradation in
/// both conventions. Throws ConfigError when best <= 0.
double forgetting_drop(double best, double later, bool higher_is_better);

struct MetricsRecord {
  long step = 0;
  int phase = 0;
  std::string dist;
  double ppl = 0.0;
  double acc = 0.0;
  double l_perp = 0.0;
  double l_kl = 0.0;
  double l_l2 = 0.0;
  double l_aux = 0.0;
  int experts = 0;

  bool operator==(const MetricsRecord&) const = default;
};

/// One flat JSON object, keys in the fixed order step, phase, dist, ppl,
/// acc, l_perp, l_kl, l_l2, l_aux, experts.
std::string to_jsonl(const MetricsRecord& r);
MetricsRecord parse_jsonl_line(const std::string& line);

struct ParsedMetrics {
  std::vector<MetricsRecord> records;
  std::size_t skipped = 0;  // corrupt lines
};
ParsedMetrics read_metrics(const std::filesystem::path& path);

/// Value of one distribution at the end of one phase, with drops relative to
/// the end of the distribution's own phase (absent before that phase).
struct ForgettingRow {
  std::string dist;
  int phase = 0;
  long step = 0;
  double ppl = 0.0;
  double acc = 0.0;
  std::optional<double> ppl_drop_pct;
  std::optional<double> acc_drop_pct;
  std::optional<double> ppl_ratio;  // ppl / ppl at own phase end
};

struct ForgettingReport {
  std::vector<ForgettingRow> rows;  // ordered by dist (first appearance), then phase
  std::map<std::string, int> own_phase;

  const ForgettingRow* find(const std::string& dist, int phase) const;
  /// Row of `dist` at the last phase end.
  const ForgettingRow* final_row(const std::string& dist) const;
};

/// Phase-end values are the records with the largest step of each phase.
/// `own_phase` maps a distribution to the phase that trains on it; missing
/// entries fall back to the order of first appearance.
ForgettingReport build_report(const std::vector<MetricsRecord>& records,
                              const std::map<std::string, int>& own_phase = {});

std::string format_g6(double v);
std::string summary_csv(const ForgettingReport& report);
std::string report_csv(const std::vector<MetricsRecord>& records);

/// Writes metrics.jsonl, report.csv and summary.csv under `out_dir`.
/// Throws std::runtime_error when the directory cannot be written.
void emit_report(const std::vector<MetricsRecord>& records, const std::filesystem::path& out_dir,
                 const std::map<std::string, int>& own_phase = {});

/// Human-readable forgetting table.
std::string forgetting_table(const ForgettingReport& report);

/// One line per run: final-phase drops per distribution, mirroring a
/// strategies × distributions comparison.
struct ComparisonRow {
  std::string run;
  std::string dist;
  double own_ppl = 0.0;
  double final_ppl = 0.0;
  double ppl_drop_pct = 0.0;
  double ppl_ratio = 0.0;
};
std::string comparison_csv(const std::vector<ComparisonRow>& rows);
std::vector<ComparisonRow> comparison_rows(const std::string& run, const ForgettingReport& report);

}  // namespace lmoe
