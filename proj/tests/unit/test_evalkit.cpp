// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "lmoe/common/error.hpp"
#include "lmoe/evalkit/evalkit.hpp"

namespace lmoe {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("lmoe_evalkit_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

TEST(ScoreLogits, UniformLogits) {
  const std::size_t v = 7;
  const std::vector<double> logits(3 * v, 0.25);
  const std::vector<int> targets = {0, 3, 6};
  const auto r = score_logits(logits, v, targets);
  EXPECT_NEAR(r.ppl, 7.0, 1e-12);
  // ties go to token 0
  EXPECT_NEAR(r.acc, 1.0 / 3.0, 1e-15);
  EXPECT_EQ(r.tokens, 3u);
}

TEST(ScoreLogits, HandProbabilities) {
  // p(target) = 0.5 then 0.25
  const std::vector<double> logits = {std::log(0.5), std::log(0.5), std::log(0.25), std::log(0.75)};
  const std::vector<int> targets = {0, 0};
  const auto r = score_logits(logits, 2, targets);
  EXPECT_NEAR(r.ppl, 2.8284, 1e-4);
  EXPECT_NEAR(r.ppl, std::exp(-(std::log(0.5) + std::log(0.25)) / 2), 1e-12);
  EXPECT_NEAR(r.acc, 0.5, 1e-15);
}

TEST(ScoreLogits, ConfidentCorrectNearOne) {
  const std::vector<double> logits = {40.0, 0.0, 0.0, 0.0, 40.0, 0.0};
  const std::vector<int> targets = {0, 1};
  const auto r = score_logits(logits, 3, targets);
  EXPECT_NEAR(r.ppl, 1.0, 1e-12);
  EXPECT_EQ(r.acc, 1.0);
}

TEST(ScoreLogits, Errors) {
  const std::vector<double> logits(6, 0.0);
  const std::vector<int> one = {0};
  EXPECT_THROW(score_logits(logits, 3, one), ShapeError);
  EXPECT_THROW(score_logits({}, 3, {}), ConfigError);
}

TEST(Evaluate, DeterministicAndEmptyFails) {
  ModelConfig c;
  c.layers = 2;
  c.d_model = 16;
  c.d_hidden = 32;
  c.n_heads = 2;
  c.d_head = 8;
  c.vocab_size = 96;
  c.max_seq_len = 16;
  c.experts = 4;
  TransformerLM<float> model(c, 1);
  StreamPlan plan;
  plan.phases = {default_distribution("A")};
  plan.seq_len = 16;
  plan.batch_size = 4;
  DataStream s(plan, 1);
  const auto set = s.eval_set(0, 3);
  const auto a = evaluate(model, set), b = evaluate(model, set);
  EXPECT_EQ(a.ppl, b.ppl);
  EXPECT_EQ(a.acc, b.acc);
  EXPECT_EQ(a.tokens, 3u * 4u * 16u);
  EXPECT_GE(a.ppl, 1.0);
  EXPECT_EQ(eval_perplexity(model, set), a.ppl);
  EXPECT_EQ(eval_next_token_acc(model, set), a.acc);
  EXPECT_THROW(evaluate(model, std::vector<Batch>{}), ConfigError);
}

struct DropCase {
  double best, later, want;
};

TEST(ForgettingDrop, ReferencePairs) {
  const DropCase cases[] = {{33.66, 26.81, -20.4}, {25.23, 12.99, -48.5}, {25.23, 17.0, -32.6},
                            {25.23, 14.18, -43.7}, {33.66, 20.22, -39.9}, {20.77, 5.66, -72.7},
                            {22.63, 19.16, -15.3}};
  for (const auto& c : cases) EXPECT_NEAR(forgetting_drop(c.best, c.later, true), c.want, 0.1) << c.best << " " << c.later;
}

TEST(ForgettingDrop, Conventions) {
  EXPECT_EQ(forgetting_drop(5.0, 5.0, true), 0.0);
  EXPECT_EQ(forgetting_drop(5.0, 5.0, false), 0.0);
  EXPECT_NEAR(forgetting_drop(10.0, 12.0, false), -20.0, 1e-12);
  EXPECT_NEAR(forgetting_drop(10.0, 8.0, false), 20.0, 1e-12);
  for (double x : {-0.5, -0.1, 0.0, 0.3}) EXPECT_NEAR(forgetting_drop(4.0, 4.0 * (1 + x), true), 100 * x, 1e-12);
  EXPECT_THROW(forgetting_drop(0.0, 1.0, true), ConfigError);
  EXPECT_THROW(forgetting_drop(-1.0, 1.0, false), ConfigError);
}

MetricsRecord rec(long step, int phase, const std::string& dist, double ppl, double acc) {
  MetricsRecord r;
  r.step = step;
  r.phase = phase;
  r.dist = dist;
  r.ppl = ppl;
  r.acc = acc;
  r.l_perp = 1.25;
  r.l_kl = 0.5;
  r.experts = 4 + phase;
  return r;
}

// Three phases of 10 steps, evaluated at steps 5 and 10 of each phase.
std::vector<MetricsRecord> stream_records() {
  std::vector<MetricsRecord> out;
  const char* dists[] = {"A", "B", "C"};
  for (int phase = 0; phase < 3; ++phase)
    for (long s : {5L, 10L})
      for (int d = 0; d < 3; ++d) {
        const long step = phase * 10 + s;
        // own distribution improves during its phase, others degrade afterwards
        const double ppl = d == phase ? 20.0 - s : 30.0 + step * (d < phase ? 1.0 : 0.0);
        out.push_back(rec(step, phase, dists[d], ppl, 1.0 / ppl));
      }
  return out;
}

TEST(Jsonl, FixedKeyOrderAndRoundTrip) {
  const auto r = rec(17, 1, "B", 12.5, 0.125);
  const auto line = to_jsonl(r);
  EXPECT_EQ(line.find("{\"step\":17,\"phase\":1,\"dist\":\"B\",\"ppl\":12.5,\"acc\":0.125,\"l_perp\":1.25,"), 0u) << line;
  EXPECT_LT(line.find("l_aux"), line.find("experts"));
  EXPECT_EQ(line.find('\n'), std::string::npos);
  EXPECT_EQ(parse_jsonl_line(line), r);
  MetricsRecord odd = r;
  odd.ppl = 1.0 / 3.0;
  EXPECT_EQ(parse_jsonl_line(to_jsonl(odd)), odd);
}

TEST(Jsonl, CorruptLinesAreSkipped) {
  const auto dir = temp_dir("corrupt");
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "m.jsonl");
    f << to_jsonl(rec(1, 0, "A", 3, 0.5)) << "\n";
    f << "{\"step\": 2, \"phase\n";
    f << "\n";
    f << to_jsonl(rec(2, 0, "A", 2.5, 0.5)) << "\n";
    f << "[1,2,3]\n";
  }
  const auto parsed = read_metrics(dir / "m.jsonl");
  EXPECT_EQ(parsed.records.size(), 2u);
  EXPECT_EQ(parsed.skipped, 2u);
}

TEST(Report, ThreePhaseEndRowsPerDistribution) {
  const auto report = build_report(stream_records());
  for (const char* d : {"A", "B", "C"}) {
    std::size_t n = 0;
    for (const auto& r : report.rows) n += r.dist == d;
    EXPECT_EQ(n, 3u) << d;
  }
  // A's own phase ends at step 10 with ppl 10; at the end of C (step 30) it is 30 + 30
  const auto* a_own = report.find("A", 0);
  ASSERT_NE(a_own, nullptr);
  EXPECT_EQ(a_own->step, 10);
  EXPECT_EQ(a_own->ppl, 10.0);
  EXPECT_NEAR(*a_own->ppl_drop_pct, 0.0, 1e-12);
  const auto* a_end = report.final_row("A");
  EXPECT_EQ(a_end->phase, 2);
  EXPECT_EQ(a_end->ppl, 60.0);
  EXPECT_NEAR(*a_end->ppl_ratio, 6.0, 1e-12);
  EXPECT_NEAR(*a_end->ppl_drop_pct, -500.0, 1e-9);
  // no drop before a distribution's own phase
  EXPECT_FALSE(report.find("C", 0)->ppl_drop_pct.has_value());
  EXPECT_FALSE(report.find("C", 1)->ppl_ratio.has_value());
  EXPECT_TRUE(report.find("C", 2)->ppl_ratio.has_value());
}

TEST(Report, ExplicitOwnPhase) {
  const auto report = build_report(stream_records(), {{"A", 1}, {"B", 0}, {"C", 2}});
  EXPECT_EQ(report.own_phase.at("B"), 0);
  EXPECT_FALSE(report.find("A", 0)->ppl_ratio.has_value());
  EXPECT_TRUE(report.find("B", 0)->ppl_ratio.has_value());
}

TEST(Report, FilesAndCounts) {
  const auto records = stream_records();
  const auto dir = temp_dir("emit");
  emit_report(records, dir);
  const auto report_lines = lines_of(dir / "report.csv");
  ASSERT_FALSE(report_lines.empty());
  EXPECT_EQ(report_lines[0], "step,dist,ppl,acc");
  // 6 eval events × 3 distributions
  EXPECT_EQ(report_lines.size(), 1u + 6u * 3u);
  EXPECT_EQ(report_lines[1], "5,A,15,0.0666667");

  const auto summary = lines_of(dir / "summary.csv");
  EXPECT_EQ(summary[0], "dist,phase,step,ppl,acc,ppl_drop_pct,acc_drop_pct,ppl_ratio");
  EXPECT_EQ(summary.size(), 1u + 9u);

  const auto parsed = read_metrics(dir / "metrics.jsonl");
  EXPECT_EQ(parsed.records, records);
  EXPECT_EQ(parsed.skipped, 0u);

  const auto again = temp_dir("emit2");
  emit_report(records, again);
  for (const char* f : {"metrics.jsonl", "report.csv", "summary.csv"}) EXPECT_EQ(lines_of(dir / f), lines_of(again / f)) << f;
}

TEST(Report, UnwritableDirectory) {
  const auto blocker = temp_dir("blocker");
  fs::create_directories(blocker.parent_path());
  std::ofstream(blocker) << "a file, not a directory";
  EXPECT_THROW(emit_report(stream_records(), blocker / "sub"), std::runtime_error);
  fs::remove(blocker);
}

TEST(Report, FormatG6) {
  EXPECT_EQ(format_g6(1.0 / 3.0), "0.333333");
  EXPECT_EQ(format_g6(123456789.0), "1.23457e+08");
  EXPECT_EQ(format_g6(15.0), "15");
}

TEST(Report, TableAndComparison) {
  const auto report = build_report(stream_records());
  const auto table = forgetting_table(report);
  EXPECT_NE(table.find("A"), std::string::npos);
  const auto rows = comparison_rows("naive", report);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].run, "naive");
  EXPECT_EQ(rows[0].dist, "A");
  EXPECT_EQ(rows[0].own_ppl, 10.0);
  EXPECT_EQ(rows[0].final_ppl, 60.0);
  const auto csv = comparison_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "run,dist,own_ppl,final_ppl,ppl_drop_pct,ppl_ratio");
}

}  // namespace
}  // namespace lmoe
