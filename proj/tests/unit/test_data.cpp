// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "lmoe/common/error.hpp"
#include "lmoe/data/data.hpp"

namespace lmoe {
namespace {

StreamPlan small_plan(std::size_t seq = 8) {
  StreamPlan p;
  p.phases = {default_distribution("A"), default_distribution("B"), default_distribution("C")};
  p.steps_per_phase = 2000;
  p.seq_len = seq;
  p.batch_size = 8;
  return p;
}

std::set<int> alphabet(const DistributionSpec& d) {
  std::set<int> s;
  for (const auto& c : d.components) {
    s.insert(c.generator.symbols.begin(), c.generator.symbols.end());
    s.insert(c.generator.speakers.begin(), c.generator.speakers.end());
    if (c.generator.kind == GeneratorKind::template_grammar) s.insert(c.generator.eot);
  }
  return s;
}

TEST(Tokenize, Bytes) {
  EXPECT_EQ(tokenize_bytes("ab"), (std::vector<int>{97, 98}));
  EXPECT_TRUE(tokenize_bytes("").empty());
  std::string all;
  for (int i = 0; i < 256; ++i) all.push_back(static_cast<char>(i));
  EXPECT_EQ(detokenize_bytes(tokenize_bytes(all)), all);
  const auto ids = tokenize_bytes(all);
  EXPECT_EQ(ids[255], 255);
  std::vector<int> with_specials = {kBos, 104, 105, kEos, kPad};
  EXPECT_EQ(detokenize_bytes(with_specials), "hi");
}

TEST(Markov2, RowsAreDistributions) {
  Markov2 m({1, 2, 3, 4, 5}, 7, 2.0);
  for (std::size_t a = 0; a < 5; ++a)
    for (std::size_t b = 0; b < 5; ++b) {
      double s = 0.0;
      for (std::size_t c = 0; c < 5; ++c) s += m.prob(a, b, c);
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  EXPECT_THROW(Markov2({1}, 7, 2.0), ConfigError);
}

TEST(Markov2, EmpiricalMatchesStationary) {
  const Markov2 m({10, 11, 12, 13, 14, 15, 16, 17}, 3, 2.0);
  const std::size_t n = m.states();
  // power iteration over pair states (a, b) → (b, c)
  std::vector<double> pair(n * n, 1.0 / static_cast<double>(n * n));
  for (int it = 0; it < 3000; ++it) {
    std::vector<double> next(n * n, 0.0);
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < n; ++c) next[b * n + c] += pair[a * n + b] * m.prob(a, b, c);
    pair = next;
  }
  std::vector<double> oracle(18, 0.0);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) oracle[m.symbols()[b]] += pair[a * n + b];

  std::mt19937_64 rng(1);
  const auto tokens = m.chain(100000, rng);
  const auto emp = unigram(tokens, 18);
  EXPECT_LT(total_variation(emp, oracle), 0.02);

  const auto lib = markov2_stationary(m);
  for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(lib[i], oracle[m.symbols()[i]], 1e-6);
}

TEST(TotalVariation, HandValues) {
  const std::vector<double> p = {0.5, 0.5, 0.0}, q = {0.0, 0.5, 0.5};
  EXPECT_DOUBLE_EQ(total_variation(p, q), 0.5);
  EXPECT_DOUBLE_EQ(total_variation(p, p), 0.0);
  const std::vector<int> t = {0, 1, 1, 3};
  EXPECT_EQ(unigram(t, 4), (std::vector<double>{0.25, 0.5, 0.0, 0.25}));
}

TEST(Distribution, DeterministicByDrawIndex) {
  Distribution d(default_distribution("A"));
  EXPECT_EQ(d.sequence_at(64, 5), d.sequence_at(64, 5));
  EXPECT_NE(d.sequence_at(64, 5), d.sequence_at(64, 6));
  std::mt19937_64 r1(3), r2(3);
  EXPECT_EQ(d.sequence(32, r1), d.sequence(32, r2));
}

TEST(Distribution, SingleComponentMixture) {
  auto spec = default_distribution("A");
  spec.components.resize(1);
  spec.components[0].weight = 1.0;
  ASSERT_TRUE(spec.validate("d").empty());
  Distribution d(spec);
  const auto allowed = alphabet(spec);
  for (std::size_t i = 0; i < 50; ++i)
    for (int t : d.sequence_at(32, i)) EXPECT_TRUE(allowed.count(t)) << t;
}

TEST(Distribution, Validation) {
  auto spec = default_distribution("A");
  spec.components[0].weight = 0.5;
  EXPECT_FALSE(spec.validate("d").empty());
  spec = default_distribution("A");
  spec.components[0].weight = -0.19;
  spec.components[1].weight = 1.19;
  EXPECT_FALSE(spec.validate("d").empty());
  EXPECT_TRUE(default_distribution("C").validate("d").empty());
  EXPECT_THROW(default_distribution("D"), ConfigError);
}

TEST(Distribution, DefaultsAreDistinguishable) {
  std::vector<std::vector<double>> u;
  for (const char* id : {"A", "B", "C"}) {
    Distribution d(default_distribution(id));
    std::vector<int> all;
    for (std::size_t i = 0; all.size() < 100000; ++i) {
      const auto s = d.sequence_at(128, i);
      all.insert(all.end(), s.begin(), s.end());
    }
    EXPECT_LT(d.max_token(), 96);
    u.push_back(unigram(all, 96));
  }
  EXPECT_GE(total_variation(u[0], u[1]), 0.3);
  EXPECT_GE(total_variation(u[0], u[2]), 0.3);
  EXPECT_GE(total_variation(u[1], u[2]), 0.3);
}

TEST(Grammar, TurnStructure) {
  const auto spec = default_distribution("C");
  const auto& g = spec.components[0].generator;
  ASSERT_EQ(g.kind, GeneratorKind::template_grammar);
  Distribution d(spec);
  const auto seq = d.sequence_at(400, 1);
  // every end-of-turn is followed by a speaker, and speakers alternate
  int last_speaker = -1;
  for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
    if (seq[i] == g.eot) {
      const int next = seq[i + 1];
      EXPECT_TRUE(next == g.speakers[0] || next == g.speakers[1]) << next;
      if (last_speaker >= 0) EXPECT_NE(next, last_speaker);
      last_speaker = next;
    }
  }
  EXPECT_GE(last_speaker, 0);
}

TEST(FileIngest, WindowsAreBytes) {
  const auto path = std::filesystem::temp_directory_path() / "lmoe_ingest.txt";
  std::ofstream(path) << "the quick brown fox jumps over the lazy dog\n";
  GeneratorSpec g;
  g.kind = GeneratorKind::file_ingest;
  g.path = path.string();
  auto gen = make_generator(g);
  std::mt19937_64 rng(1);
  for (int t : gen->sequence(64, rng)) EXPECT_TRUE(t < 256 || t == kBos || t == kEos || t == kPad) << t;
  g.path = "/nonexistent/corpus.txt";
  EXPECT_THROW(make_generator(g), ConfigError);
}

TEST(DataStream, Deterministic) {
  StrategyConfig replay;
  replay.kind = StrategyKind::memory_replay;
  DataStream a(small_plan(), 9), b(small_plan(), 9), c(small_plan(), 10);
  for (int phase = 0; phase < 3; ++phase)
    for (std::size_t step = 0; step < 20; ++step) {
      const auto x = a.next_batch(phase, step, replay);
      const auto y = b.next_batch(phase, step, replay);
      EXPECT_EQ(x.tokens, y.tokens);
      EXPECT_EQ(x.source, y.source);
    }
  EXPECT_NE(a.next_batch(0, 0, replay).tokens, c.next_batch(0, 0, replay).tokens);
  // order of requests does not matter
  const auto late = a.next_batch(2, 7, replay);
  EXPECT_EQ(DataStream(small_plan(), 9).next_batch(2, 7, replay).tokens, late.tokens);
}

TEST(DataStream, BatchShape) {
  DataStream s(small_plan(16), 1);
  const auto b = s.next_batch(1, 3, StrategyConfig{});
  EXPECT_EQ(b.rows, 8u);
  EXPECT_EQ(b.seq, 16u);
  EXPECT_EQ(b.tokens.size(), 8u * 17u);
  EXPECT_EQ(b.inputs().size(), 8u * 16u);
  const auto in = b.inputs(), tg = b.targets();
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t i = 0; i + 1 < 16; ++i) EXPECT_EQ(tg[r * 16 + i], in[r * 16 + i + 1]);
  for (int src : b.source) EXPECT_EQ(src, s.phase_distribution(1));
}

TEST(DataStream, ReplayFractionAndParity) {
  DataStream s(small_plan(), 5);
  StrategyConfig replay;
  replay.kind = StrategyKind::memory_replay;
  replay.historic_fraction = 0.25;
  std::size_t rows = 0, historic = 0, from_a = 0;
  for (std::size_t step = 0; rows < 10000; ++step) {
    const auto b = s.next_batch(2, step, replay);
    for (int src : b.source) {
      ++rows;
      if (src != s.phase_distribution(2)) ++historic;
      if (src == s.phase_distribution(0)) ++from_a;
    }
  }
  const double frac = static_cast<double>(historic) / static_cast<double>(rows);
  EXPECT_GE(frac, 0.23);
  EXPECT_LE(frac, 0.27);
  const double a_share = static_cast<double>(from_a) / static_cast<double>(historic);
  EXPECT_NEAR(a_share, 0.5, 0.03);
}

TEST(DataStream, ReplayInPhaseZeroWarns) {
  DataStream s(small_plan(), 5);
  StrategyConfig replay;
  replay.kind = StrategyKind::memory_replay;
  for (std::size_t step = 0; step < 100; ++step)
    for (int src : s.next_batch(0, step, replay).source) EXPECT_EQ(src, s.phase_distribution(0));
  EXPECT_EQ(s.warnings().size(), 1u);
}

TEST(DataStream, NonReplayStrategiesUseCurrentPhaseOnly) {
  DataStream s(small_plan(), 5);
  for (auto kind : {StrategyKind::naive_sequential, StrategyKind::lifelong_moe, StrategyKind::l2_anchor}) {
    StrategyConfig st;
    st.kind = kind;
    for (std::size_t step = 0; step < 50; ++step)
      for (int src : s.next_batch(2, step, st).source) EXPECT_EQ(src, s.phase_distribution(2));
  }
  EXPECT_TRUE(s.warnings().empty());
}

TEST(DataStream, OracleMixture) {
  DataStream s(small_plan(), 5);
  StrategyConfig oracle;
  oracle.kind = StrategyKind::joint_oracle;
  oracle.mixture = {1.0 / 3, 1.0 / 3, 1.0 / 3};
  std::vector<std::size_t> count(3, 0);
  std::size_t rows = 0;
  for (std::size_t step = 0; rows < 30000; ++step)
    for (int src : s.next_batch(1, step, oracle).source) {
      ++count.at(static_cast<std::size_t>(src));
      ++rows;
    }
  for (auto c : count) EXPECT_NEAR(static_cast<double>(c) / static_cast<double>(rows), 1.0 / 3, 0.02);
}

TEST(DataStream, ProvenanceLabelsMatchGenerators) {
  for (auto mode : {ReplayMode::regenerate, ReplayMode::stored}) {
    DataStream s(small_plan(32), 11, mode);
    std::vector<std::set<int>> allowed;
    for (const auto& d : s.distributions()) allowed.push_back(alphabet(d->spec()));
    StrategyConfig replay;
    replay.kind = StrategyKind::memory_replay;
    for (std::size_t step = 0; step < 200; ++step) {
      const auto b = s.next_batch(2, step, replay);
      for (std::size_t r = 0; r < b.rows; ++r) {
        const auto& ok = allowed.at(static_cast<std::size_t>(b.source[r]));
        for (std::size_t i = 0; i <= b.seq; ++i) ASSERT_TRUE(ok.count(b.tokens[r * (b.seq + 1) + i])) << "row " << r;
      }
    }
  }
}

TEST(DataStream, StoredReplayReusesTrainedRows) {
  DataStream s(small_plan(), 3, ReplayMode::stored);
  StrategyConfig replay;
  replay.kind = StrategyKind::memory_replay;
  std::set<std::vector<int>> seen;
  for (int phase = 0; phase < 2; ++phase)
    for (std::size_t step = 0; step < s.plan().steps_per_phase; ++step) {
      const auto b = s.next_batch(phase, step, replay);
      for (std::size_t r = 0; r < b.rows; ++r)
        seen.insert(std::vector<int>(b.tokens.begin() + r * 9, b.tokens.begin() + (r + 1) * 9));
    }
  std::size_t historic = 0;
  for (std::size_t step = 0; step < 50; ++step) {
    const auto b = s.next_batch(2, step, replay);
    for (std::size_t r = 0; r < b.rows; ++r) {
      if (b.source[r] == s.phase_distribution(2)) continue;
      ++historic;
      EXPECT_TRUE(seen.count(std::vector<int>(b.tokens.begin() + r * 9, b.tokens.begin() + (r + 1) * 9)));
    }
  }
  EXPECT_GT(historic, 0u);
}

TEST(DataStream, EvalSetsAreFixedAndDisjointFromTraining) {
  DataStream s(small_plan(), 3);
  const auto e1 = s.eval_set(0, 4);
  const auto e2 = DataStream(small_plan(), 3).eval_set(0, 4);
  ASSERT_EQ(e1.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(e1[i].tokens, e2[i].tokens);
  std::set<std::vector<int>> train;
  for (std::size_t step = 0; step < 500; ++step) {
    const auto b = s.next_batch(0, step, StrategyConfig{});
    for (std::size_t r = 0; r < b.rows; ++r)
      train.insert(std::vector<int>(b.tokens.begin() + r * 9, b.tokens.begin() + (r + 1) * 9));
  }
  std::size_t overlap = 0, total = 0;
  for (const auto& b : e1)
    for (std::size_t r = 0; r < b.rows; ++r, ++total)
      overlap += train.count(std::vector<int>(b.tokens.begin() + r * 9, b.tokens.begin() + (r + 1) * 9));
  // short windows can collide by chance; the streams themselves differ
  EXPECT_LT(overlap, total / 4);
}

TEST(StreamPlan, ValidationAndJson) {
  auto p = small_plan();
  EXPECT_TRUE(p.validate(96).empty());
  EXPECT_FALSE(p.validate(50).empty());
  nlohmann::json j = p;
  EXPECT_EQ(j.get<StreamPlan>(), p);
  p.phases.clear();
  EXPECT_FALSE(p.validate(96).empty());
}

}  // namespace
}  // namespace lmoe
