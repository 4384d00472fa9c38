// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "lmoe/lifelong/strategy.hpp"

namespace lmoe {

// Byte-mode vocabulary used by file_ingest.
inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kPad = 258;
inline constexpr int kByteVocab = 259;

std::vector<int> tokenize_bytes(std::string_view text);
/// Inverse of tokenize_bytes; special ids are dropped.
std::string detokenize_bytes(std::span<const int> ids);

enum class GeneratorKind { markov2, template_grammar, file_ingest };
std::string to_string(GeneratorKind k);
GeneratorKind parse_generator_kind(const std::string& s);

/// One synthetic source.
///  markov2          second-order chain over `symbols`; transition logits
///                   N(0,1)·sharpness drawn from `seed`.
///  template_grammar DIALOGUE → TURN+, TURN → SPEAKER WORD{min..max} EOT;
///                   speakers alternate, words follow a per-speaker Zipf law
///                   over a `seed`-shuffled order of `symbols`.
///  file_ingest      windows of BOS bytes EOS read from `path`.
struct GeneratorSpec {
  GeneratorKind kind = GeneratorKind::markov2;
  std::vector<int> symbols;
  std::uint64_t seed = 0;
  double sharpness = 2.0;
  std::vector<int> speakers;
  int eot = 0;
  int min_words = 2;
  int max_words = 8;
  double zipf = 1.1;
  std::string path;

  bool operator==(const GeneratorSpec&) const = default;
};

struct MixtureComponent {
  GeneratorSpec generator;
  double weight = 1.0;

  bool operator==(const MixtureComponent&) const = default;
};

struct DistributionSpec {
  std::string id;
  std::vector<MixtureComponent> components;
  std::uint64_t seed = 0;

  std::vector<std::string> validate(const std::string& prefix) const;
  bool operator==(const DistributionSpec&) const = default;
};

/// Default stand-ins: A (two markov2 components weighted 0.19 / 0.81),
/// B (markov2 on a disjoint symbol set), C (turn-taking dialogue grammar).
/// All fit the default 96-token vocabulary.
DistributionSpec default_distribution(const std::string& id);

struct StreamPlan {
  std::vector<DistributionSpec> phases;
  std::size_t steps_per_phase = 2000;
  std::size_t seq_len = 128;
  std::size_t batch_size = 8;  // rows; tokens per batch = batch_size · seq_len

  std::vector<std::string> validate(int vocab_size, const std::string& prefix = "plan") const;
  bool operator==(const StreamPlan&) const = default;
};

void to_json(nlohmann::json& j, const GeneratorSpec& g);
void from_json(const nlohmann::json& j, GeneratorSpec& g);
void to_json(nlohmann::json& j, const DistributionSpec& d);
void from_json(const nlohmann::json& j, DistributionSpec& d);
void to_json(nlohmann::json& j, const StreamPlan& p);
void from_json(const nlohmann::json& j, StreamPlan& p);

/// Compiled generator. Throws ConfigError on degenerate parameters.
class Generator {
 public:
  virtual ~Generator() = default;
  virtual std::vector<int> sequence(std::size_t length, std::mt19937_64& rng) const = 0;
  virtual int max_token() const = 0;
};

std::unique_ptr<Generator> make_generator(const GeneratorSpec& spec);

/// Second-order Markov chain over a symbol list.
class Markov2 : public Generator {
 public:
  Markov2(std::vector<int> symbols, std::uint64_t seed, double sharpness);

  std::vector<int> sequence(std::size_t length, std::mt19937_64& rng) const override;
  int max_token() const override;

  std::size_t states() const { return symbols_.size(); }
  const std::vector<int>& symbols() const { return symbols_; }
  /// P(next = c | prev2 = a, prev1 = b), indices into symbols().
  double prob(std::size_t a, std::size_t b, std::size_t c) const { return probs_[(a * n() + b) * n() + c]; }
  /// One continuous chain of `length` tokens (no restarts).
  std::vector<int> chain(std::size_t length, std::mt19937_64& rng) const;

 private:
  std::size_t n() const { return symbols_.size(); }
  std::size_t draw(std::size_t a, std::size_t b, std::mt19937_64& rng) const;

  std::vector<int> symbols_;
  std::vector<double> probs_;
  std::vector<double> cdf_;
};

/// A distribution spec with its generators compiled.
class Distribution {
 public:
  explicit Distribution(DistributionSpec spec);

  const DistributionSpec& spec() const { return spec_; }
  const std::string& id() const { return spec_.id; }
  /// Picks a component by mixture weight, then emits `length` tokens from it.
  std::vector<int> sequence(std::size_t length, std::mt19937_64& rng) const;
  /// Deterministic in (spec seed, draw index).
  std::vector<int> sequence_at(std::size_t length, std::uint64_t draw_index) const;
  int max_token() const;
  const Generator& component(std::size_t i) const { return *generators_.at(i); }

 private:
  DistributionSpec spec_;
  std::vector<std::unique_ptr<Generator>> generators_;
  std::vector<double> cumulative_;
};

/// rows × (seq + 1) tokens; row r trains on tokens[r][0..seq) → tokens[r][1..seq].
struct Batch {
  std::size_t rows = 0;
  std::size_t seq = 0;
  std::vector<int> tokens;
  std::vector<int> source;  // index into the plan's distinct distributions, per row

  std::vector<int> inputs() const;
  std::vector<int> targets() const;
};

enum class ReplayMode { regenerate, stored };
std::string to_string(ReplayMode m);
ReplayMode parse_replay_mode(const std::string& s);

/// Historic-row policy for memory replay. Regenerate draws fresh rows from
/// the historic distributions; stored replays rows that earlier phases
/// actually trained on (re-derived from the deterministic stream, so nothing
/// is kept in memory).
struct ReplayBuffer {
  ReplayMode mode = ReplayMode::regenerate;
  double historic_fraction = 0.25;

  /// Historic phase for the row, or -1 for the current phase.
  int draw_source(int phase, std::mt19937_64& rng) const;
};

/// Phase-ordered training stream plus held-out evaluation sets.
class DataStream {
 public:
  DataStream(StreamPlan plan, std::uint64_t seed, ReplayMode replay_mode = ReplayMode::regenerate);

  const StreamPlan& plan() const { return plan_; }
  std::size_t phases() const { return plan_.phases.size(); }
  /// Distinct distributions in order of first appearance (eval targets).
  const std::vector<std::unique_ptr<Distribution>>& distributions() const { return distributions_; }
  /// Index into distributions() of phase p's distribution.
  int phase_distribution(int phase) const { return phase_dist_.at(static_cast<std::size_t>(phase)); }

  /// Training batch for (phase, step) under `strategy`; pure in its arguments.
  Batch next_batch(int phase, std::size_t step, const StrategyConfig& strategy) const;

  /// Held-out batches of distribution `dist`, from a seed stream disjoint from training.
  std::vector<Batch> eval_set(int dist, std::size_t batches = 50) const;

  /// Non-fatal notices (replay requested in phase 0, ...), each reported once.
  std::vector<std::string> warnings() const;

 private:
  std::vector<int> training_row(int phase, std::size_t step, std::size_t row, const StrategyConfig& strategy,
                                int& source) const;

  StreamPlan plan_;
  std::uint64_t seed_;
  ReplayBuffer replay_;
  std::vector<std::unique_ptr<Distribution>> distributions_;
  std::vector<int> phase_dist_;
  mutable std::vector<std::string> warnings_;
};

/// Generator for one (seed, domain, a, b, c) coordinate of the data stream.
std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t domain, std::uint64_t a, std::uint64_t b,
                           std::uint64_t c);

/// Stationary unigram distribution of a Markov2 chain by power iteration
/// over symbol pairs.
std::vector<double> markov2_stationary(const Markov2& chain, int iterations = 2000);

/// Empirical unigram frequencies of `tokens` over ids [0, vocab).
std::vector<double> unigram(std::span<const int> tokens, int vocab);
double total_variation(std::span<const double> p, std::span<const double> q);

}  // namespace lmoe
