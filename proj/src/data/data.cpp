// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmoe/data/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <set>

#include "lmoe/common/error.hpp"

namespace lmoe {

namespace {

enum Domain : std::uint64_t { kTrain = 1, kEval = 2, kDraw = 3 };

constexpr std::size_t kBurnIn = 32;

std::size_t pick(std::span<const double> cdf, std::mt19937_64& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng) * cdf.back();
  const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
}

class TemplateGrammar : public Generator {
 public:
  explicit TemplateGrammar(const GeneratorSpec& s)
      : speakers_(s.speakers), words_(s.symbols), eot_(s.eot), min_(s.min_words), max_(s.max_words) {
    std::mt19937_64 rng(s.seed);
    for (std::size_t k = 0; k < speakers_.size(); ++k) {
      std::vector<std::size_t> order(words_.size());
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      std::vector<double> cdf(words_.size());
      double acc = 0.0;
      for (std::size_t r = 0; r < order.size(); ++r) {
        acc += 1.0 / std::pow(static_cast<double>(r + 1), s.zipf);
        cdf[r] = acc;
      }
      orders_.push_back(std::move(order));
      cdfs_.push_back(std::move(cdf));
    }
  }

  std::vector<int> sequence(std::size_t length, std::mt19937_64& rng) const override {
    std::vector<int> out;
    out.reserve(length);
    std::size_t speaker = 0;
    while (out.size() < length) {
      out.push_back(speakers_[speaker]);
      const int n = std::uniform_int_distribution<int>(min_, max_)(rng);
      for (int i = 0; i < n; ++i) out.push_back(words_[orders_[speaker][pick(cdfs_[speaker], rng)]]);
      out.push_back(eot_);
      speaker = (speaker + 1) % speakers_.size();
    }
    out.resize(length);
    return out;
  }

  int max_token() const override {
    int m = eot_;
    for (int s : speakers_) m = std::max(m, s);
    for (int w : words_) m = std::max(m, w);
    return m;
  }

 private:
  std::vector<int> speakers_, words_;
  int eot_, min_, max_;
  std::vector<std::vector<std::size_t>> orders_;
  std::vector<std::vector<double>> cdfs_;
};

class FileIngest : public Generator {
 public:
  explicit FileIngest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("file_ingest: cannot read '" + path + "'");
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    tokens_.push_back(kBos);
    const auto bytes = tokenize_bytes(text);
    tokens_.insert(tokens_.end(), bytes.begin(), bytes.end());
    tokens_.push_back(kEos);
  }

  std::vector<int> sequence(std::size_t length, std::mt19937_64& rng) const override {
    if (tokens_.size() <= length) {
      std::vector<int> out(tokens_);
      out.resize(length, kPad);
      return out;
    }
    const auto off = std::uniform_int_distribution<std::size_t>(0, tokens_.size() - length)(rng);
    return {tokens_.begin() + static_cast<std::ptrdiff_t>(off),
            tokens_.begin() + static_cast<std::ptrdiff_t>(off + length)};
  }

  int max_token() const override { return kPad; }

 private:
  std::vector<int> tokens_;
};

std::vector<std::string> validate_generator(const GeneratorSpec& g, const std::string& prefix) {
  std::vector<std::string> errs;
  auto distinct_nonneg = [&](const std::vector<int>& ids, const char* field, std::size_t min_count) {
    std::set<int> seen(ids.begin(), ids.end());
    if (ids.size() < min_count)
      errs.push_back(prefix + "." + field + " needs at least " + std::to_string(min_count) + " entries");
    if (seen.size() != ids.size()) errs.push_back(prefix + "." + field + " has duplicates");
    if (!ids.empty() && *seen.begin() < 0) errs.push_back(prefix + "." + field + " has negative ids");
  };
  switch (g.kind) {
    case GeneratorKind::markov2:
      distinct_nonneg(g.symbols, "symbols", 2);
      if (!(g.sharpness >= 0.0) || !std::isfinite(g.sharpness))
        errs.push_back(prefix + ".sharpness must be a finite value >= 0");
      break;
    case GeneratorKind::template_grammar:
      distinct_nonneg(g.symbols, "symbols", 1);
      distinct_nonneg(g.speakers, "speakers", 1);
      if (g.eot < 0) errs.push_back(prefix + ".eot must be >= 0");
      if (g.min_words < 1 || g.max_words < g.min_words)
        errs.push_back(prefix + ": need 1 <= min_words <= max_words");
      if (!(g.zipf > 0.0) || !std::isfinite(g.zipf)) errs.push_back(prefix + ".zipf must be positive");
      break;
    case GeneratorKind::file_ingest:
      if (g.path.empty()) errs.push_back(prefix + ".path is empty");
      break;
  }
  return errs;
}

std::vector<int> range_ids(int lo, int hi) {
  std::vector<int> v(static_cast<std::size_t>(hi - lo));
  std::iota(v.begin(), v.end(), lo);
  return v;
}

GeneratorSpec markov_spec(std::vector<int> symbols, std::uint64_t seed, double sharpness) {
  GeneratorSpec g;
  g.kind = GeneratorKind::markov2;
  g.symbols = std::move(symbols);
  g.seed = seed;
  g.sharpness = sharpness;
  return g;
}

}  // namespace

std::vector<int> tokenize_bytes(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(static_cast<unsigned char>(c));
  return ids;
}

std::string detokenize_bytes(std::span<const int> ids) {
  std::string s;
  for (int id : ids)
    if (id >= 0 && id < 256) s.push_back(static_cast<char>(id));
  return s;
}

std::string to_string(GeneratorKind k) {
  switch (k) {
    case GeneratorKind::markov2: return "markov2";
    case GeneratorKind::template_grammar: return "template_grammar";
    case GeneratorKind::file_ingest: return "file_ingest";
  }
  return "markov2";
}

GeneratorKind parse_generator_kind(const std::string& s) {
  for (auto k : {GeneratorKind::markov2, GeneratorKind::template_grammar, GeneratorKind::file_ingest})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown generator kind '" + s + "' (expected markov2, template_grammar or file_ingest)");
}

std::string to_string(ReplayMode m) { return m == ReplayMode::regenerate ? "regenerate" : "stored"; }

ReplayMode parse_replay_mode(const std::string& s) {
  if (s == "regenerate") return ReplayMode::regenerate;
  if (s == "stored") return ReplayMode::stored;
  throw ConfigError("unknown replay mode '" + s + "' (expected regenerate or stored)");
}

std::vector<std::string> DistributionSpec::validate(const std::string& prefix) const {
  std::vector<std::string> errs;
  if (id.empty()) errs.push_back(prefix + ".id is empty");
  if (components.empty()) errs.push_back(prefix + " has no components");
  double total = 0.0;
  bool positive = true;
  for (std::size_t i = 0; i < components.size(); ++i) {
    const auto& c = components[i];
    const std::string p = prefix + ".components[" + std::to_string(i) + "]";
    if (!(c.weight > 0.0) || !std::isfinite(c.weight)) {
      errs.push_back(p + ".weight must be positive");
      positive = false;
    }
    total += c.weight;
    auto g = validate_generator(c.generator, p);
    errs.insert(errs.end(), g.begin(), g.end());
  }
  if (positive && !components.empty() && std::abs(total - 1.0) > 1e-9)
    errs.push_back(prefix + " mixture weights sum to " + std::to_string(total) + ", expected 1");
  return errs;
}

DistributionSpec default_distribution(const std::string& id) {
  DistributionSpec d;
  d.id = id;
  if (id == "A") {
    auto symbols = range_ids(4, 36);
    symbols.insert(symbols.begin(), 3);
    d.components.push_back({markov_spec(symbols, 0xA1, 4.0), 0.19});
    d.components.push_back({markov_spec(symbols, 0xA2, 4.0), 0.81});
    d.seed = 0xA;
  } else if (id == "B") {
    auto symbols = range_ids(36, 68);
    symbols.insert(symbols.begin(), 3);
    d.components.push_back({markov_spec(symbols, 0xB1, 4.0), 1.0});
    d.seed = 0xB;
  } else if (id == "C") {
    GeneratorSpec g;
    g.kind = GeneratorKind::template_grammar;
    g.speakers = {68, 69};
    g.eot = 70;
    g.symbols = range_ids(71, 96);
    g.seed = 0xC1;
    g.min_words = 2;
    g.max_words = 8;
    g.zipf = 1.1;
    d.components.push_back({g, 1.0});
    d.seed = 0xC;
  } else {
    throw ConfigError("unknown default distribution '" + id + "' (expected A, B or C)");
  }
  return d;
}

std::vector<std::string> StreamPlan::validate(int vocab_size, const std::string& prefix) const {
  std::vector<std::string> errs;
  if (phases.empty()) errs.push_back(prefix + ".phases is empty");
  if (steps_per_phase == 0) errs.push_back(prefix + ".steps_per_phase must be positive");
  if (seq_len == 0) errs.push_back(prefix + ".seq_len must be positive");
  if (batch_size == 0) errs.push_back(prefix + ".batch_size must be positive");
  for (std::size_t i = 0; i < phases.size(); ++i) {
    const std::string p = prefix + ".phases[" + std::to_string(i) + "]";
    auto e = phases[i].validate(p);
    if (!e.empty()) {
      errs.insert(errs.end(), e.begin(), e.end());
      continue;
    }
    try {
      const int top = Distribution(phases[i]).max_token();
      if (top >= vocab_size) {
        errs.push_back(p + " emits token " + std::to_string(top) + " but model.vocab_size is " +
                       std::to_string(vocab_size));
      }
    } catch (const std::exception& ex) {
      errs.push_back(p + ": " + ex.what());
    }
  }
  return errs;
}

void to_json(nlohmann::json& j, const GeneratorSpec& g) {
  j = nlohmann::json{{"kind", to_string(g.kind)}};
  switch (g.kind) {
    case GeneratorKind::markov2:
      j["symbols"] = g.symbols;
      j["seed"] = g.seed;
      j["sharpness"] = g.sharpness;
      break;
    case GeneratorKind::template_grammar:
      j["symbols"] = g.symbols;
      j["seed"] = g.seed;
      j["speakers"] = g.speakers;
      j["eot"] = g.eot;
      j["min_words"] = g.min_words;
      j["max_words"] = g.max_words;
      j["zipf"] = g.zipf;
      break;
    case GeneratorKind::file_ingest: j["path"] = g.path; break;
  }
}

void from_json(const nlohmann::json& j, GeneratorSpec& g) {
  GeneratorSpec d;
  g = d;
  g.kind = parse_generator_kind(j.at("kind").get<std::string>());
  g.symbols = j.value("symbols", d.symbols);
  g.seed = j.value("seed", d.seed);
  g.sharpness = j.value("sharpness", d.sharpness);
  g.speakers = j.value("speakers", d.speakers);
  g.eot = j.value("eot", d.eot);
  g.min_words = j.value("min_words", d.min_words);
  g.max_words = j.value("max_words", d.max_words);
  g.zipf = j.value("zipf", d.zipf);
  g.path = j.value("path", d.path);
}

void to_json(nlohmann::json& j, const DistributionSpec& d) {
  for (const char* id : {"A", "B", "C"}) {
    if (d.id == id && d == default_distribution(id)) {
      j = d.id;
      return;
    }
  }
  auto comps = nlohmann::json::array();
  for (const auto& c : d.components) comps.push_back({{"generator", c.generator}, {"weight", c.weight}});
  j = nlohmann::json{{"id", d.id}, {"seed", d.seed}, {"components", comps}};
}

void from_json(const nlohmann::json& j, DistributionSpec& d) {
  if (j.is_string()) {
    d = default_distribution(j.get<std::string>());
    return;
  }
  d = DistributionSpec{};
  d.id = j.at("id").get<std::string>();
  d.seed = j.value("seed", std::uint64_t{0});
  for (const auto& c : j.at("components")) d.components.push_back({c.at("generator").get<GeneratorSpec>(), c.value("weight", 1.0)});
}

void to_json(nlohmann::json& j, const StreamPlan& p) {
  j = nlohmann::json{{"phases", p.phases},
                     {"steps_per_phase", p.steps_per_phase},
                     {"seq_len", p.seq_len},
                     {"batch_size", p.batch_size}};
}

void from_json(const nlohmann::json& j, StreamPlan& p) {
  StreamPlan d;
  p.phases = j.at("phases").get<std::vector<DistributionSpec>>();
  p.steps_per_phase = j.value("steps_per_phase", d.steps_per_phase);
  p.seq_len = j.value("seq_len", d.seq_len);
  p.batch_size = j.value("batch_size", d.batch_size);
}

std::unique_ptr<Generator> make_generator(const GeneratorSpec& spec) {
  auto errs = validate_generator(spec, "generator");
  if (!errs.empty()) throw ConfigError(errs.front());
  switch (spec.kind) {
    case GeneratorKind::markov2: return std::make_unique<Markov2>(spec.symbols, spec.seed, spec.sharpness);
    case GeneratorKind::template_grammar: return std::make_unique<TemplateGrammar>(spec);
    case GeneratorKind::file_ingest: return std::make_unique<FileIngest>(spec.path);
  }
  throw ConfigError("unknown generator kind");
}

Markov2::Markov2(std::vector<int> symbols, std::uint64_t seed, double sharpness) : symbols_(std::move(symbols)) {
  if (symbols_.size() < 2) throw ConfigError("markov2: needs at least 2 symbols");
  if (!std::isfinite(sharpness) || sharpness < 0.0) throw ConfigError("markov2: sharpness must be finite and >= 0");
  const std::size_t k = n();
  probs_.resize(k * k * k);
  cdf_.resize(k * k * k);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> logits(k);
  for (std::size_t row = 0; row < k * k; ++row) {
    for (auto& z : logits) z = normal(rng) * sharpness;
    const double mx = *std::max_element(logits.begin(), logits.end());
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += std::exp(logits[c] - mx);
    double acc = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const double p = std::exp(logits[c] - mx) / s;
      probs_[row * k + c] = p;
      acc += p;
      cdf_[row * k + c] = acc;
    }
    if (!std::isfinite(acc) || std::abs(acc - 1.0) > 1e-9) throw ConfigError("markov2: degenerate transition row");
  }
}

std::size_t Markov2::draw(std::size_t a, std::size_t b, std::mt19937_64& rng) const {
  const std::size_t k = n();
  return pick(std::span<const double>(cdf_.data() + (a * k + b) * k, k), rng);
}

std::vector<int> Markov2::chain(std::size_t length, std::mt19937_64& rng) const {
  std::uniform_int_distribution<std::size_t> start(0, n() - 1);
  std::size_t a = start(rng), b = start(rng);
  std::vector<int> out;
  out.reserve(length);
  for (std::size_t i = 0; i < length; ++i) {
    out.push_back(symbols_[a]);
    const std::size_t c = draw(a, b, rng);
    a = b;
    b = c;
  }
  return out;
}

std::vector<int> Markov2::sequence(std::size_t length, std::mt19937_64& rng) const {
  std::uniform_int_distribution<std::size_t> start(0, n() - 1);
  std::size_t a = start(rng), b = start(rng);
  for (std::size_t i = 0; i < kBurnIn; ++i) {
    const std::size_t c = draw(a, b, rng);
    a = b;
    b = c;
  }
  std::vector<int> out;
  out.reserve(length);
  for (std::size_t i = 0; i < length; ++i) {
    out.push_back(symbols_[a]);
    const std::size_t c = draw(a, b, rng);
    a = b;
    b = c;
  }
  return out;
}

int Markov2::max_token() const { return *std::max_element(symbols_.begin(), symbols_.end()); }

Distribution::Distribution(DistributionSpec spec) : spec_(std::move(spec)) {
  auto errs = spec_.validate("distribution " + spec_.id);
  if (!errs.empty()) throw ConfigError(errs.front());
  double acc = 0.0;
  for (const auto& c : spec_.components) {
    generators_.push_back(make_generator(c.generator));
    acc += c.weight;
    cumulative_.push_back(acc);
  }
}

std::vector<int> Distribution::sequence(std::size_t length, std::mt19937_64& rng) const {
  const std::size_t c = cumulative_.size() == 1 ? 0 : pick(cumulative_, rng);
  return generators_[c]->sequence(length, rng);
}

std::vector<int> Distribution::sequence_at(std::size_t length, std::uint64_t draw_index) const {
  auto rng = stream_rng(spec_.seed, kDraw, draw_index, 0, 0);
  return sequence(length, rng);
}

int Distribution::max_token() const {
  int m = 0;
  for (const auto& g : generators_) m = std::max(m, g->max_token());
  return m;
}

std::vector<int> Batch::inputs() const {
  std::vector<int> out;
  out.reserve(rows * seq);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto* row = tokens.data() + r * (seq + 1);
    out.insert(out.end(), row, row + seq);
  }
  return out;
}

std::vector<int> Batch::targets() const {
  std::vector<int> out;
  out.reserve(rows * seq);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto* row = tokens.data() + r * (seq + 1) + 1;
    out.insert(out.end(), row, row + seq);
  }
  return out;
}

int ReplayBuffer::draw_source(int phase, std::mt19937_64& rng) const {
  if (phase < 1) return -1;
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  if (u >= historic_fraction) return -1;
  return std::uniform_int_distribution<int>(0, phase - 1)(rng);
}

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t domain, std::uint64_t a, std::uint64_t b,
                           std::uint64_t c) {
  std::vector<std::uint32_t> words;
  for (std::uint64_t v : {seed, domain, a, b, c}) {
    words.push_back(static_cast<std::uint32_t>(v));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  }
  std::seed_seq ss(words.begin(), words.end());
  return std::mt19937_64(ss);
}

DataStream::DataStream(StreamPlan plan, std::uint64_t seed, ReplayMode replay_mode)
    : plan_(std::move(plan)), seed_(seed) {
  replay_.mode = replay_mode;
  if (plan_.phases.empty()) throw ConfigError("plan.phases is empty");
  for (const auto& spec : plan_.phases) {
    int found = -1;
    for (std::size_t i = 0; i < distributions_.size(); ++i)
      if (distributions_[i]->spec() == spec) found = static_cast<int>(i);
    if (found < 0) {
      distributions_.push_back(std::make_unique<Distribution>(spec));
      found = static_cast<int>(distributions_.size() - 1);
    }
    phase_dist_.push_back(found);
  }
}

std::vector<int> DataStream::training_row(int phase, std::size_t step, std::size_t row,
                                          const StrategyConfig& strategy, int& source) const {
  auto rng = stream_rng(seed_, kTrain, static_cast<std::uint64_t>(phase), step, row);
  const std::size_t len = plan_.seq_len + 1;
  int p = phase;
  if (strategy.kind == StrategyKind::joint_oracle) {
    std::vector<double> cdf;
    double acc = 0.0;
    for (double w : strategy.mixture) cdf.push_back(acc += w);
    p = static_cast<int>(pick(cdf, rng));
  } else if (strategy.kind == StrategyKind::memory_replay) {
    ReplayBuffer rb = replay_;
    rb.historic_fraction = strategy.historic_fraction;
    const int h = rb.draw_source(phase, rng);
    if (h >= 0) {
      if (rb.mode == ReplayMode::stored) {
        const auto s = std::uniform_int_distribution<std::size_t>(0, plan_.steps_per_phase - 1)(rng);
        const auto r = std::uniform_int_distribution<std::size_t>(0, plan_.batch_size - 1)(rng);
        return training_row(h, s, r, strategy, source);
      }
      p = h;
    }
  }
  source = phase_dist_.at(static_cast<std::size_t>(p));
  return distributions_[static_cast<std::size_t>(source)]->sequence(len, rng);
}

Batch DataStream::next_batch(int phase, std::size_t step, const StrategyConfig& strategy) const {
  if (phase < 0 || static_cast<std::size_t>(phase) >= phases())
    throw ConfigError("next_batch: phase " + std::to_string(phase) + " outside the plan's " +
                      std::to_string(phases()) + " phases");
  if (strategy.kind == StrategyKind::memory_replay && phase == 0) {
    const std::string w = "memory replay has no history in phase 0; rows come from the current distribution";
    if (std::find(warnings_.begin(), warnings_.end(), w) == warnings_.end()) warnings_.push_back(w);
  }
  Batch b;
  b.rows = plan_.batch_size;
  b.seq = plan_.seq_len;
  b.tokens.reserve(b.rows * (b.seq + 1));
  for (std::size_t r = 0; r < b.rows; ++r) {
    int source = 0;
    auto row = training_row(phase, step, r, strategy, source);
    b.tokens.insert(b.tokens.end(), row.begin(), row.end());
    b.source.push_back(source);
  }
  return b;
}

std::vector<Batch> DataStream::eval_set(int dist, std::size_t batches) const {
  if (dist < 0 || static_cast<std::size_t>(dist) >= distributions_.size())
    throw ConfigError("eval_set: no distribution " + std::to_string(dist));
  std::vector<Batch> out;
  for (std::size_t i = 0; i < batches; ++i) {
    Batch b;
    b.rows = plan_.batch_size;
    b.seq = plan_.seq_len;
    for (std::size_t r = 0; r < b.rows; ++r) {
      auto rng = stream_rng(seed_, kEval, static_cast<std::uint64_t>(dist), i, r);
      auto row = distributions_[static_cast<std::size_t>(dist)]->sequence(b.seq + 1, rng);
      b.tokens.insert(b.tokens.end(), row.begin(), row.end());
      b.source.push_back(dist);
    }
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<std::string> DataStream::warnings() const { return warnings_; }

std::vector<double> markov2_stationary(const Markov2& chain, int iterations) {
  const std::size_t k = chain.states();
  std::vector<double> pi(k * k, 1.0 / static_cast<double>(k * k)), next(k * k);
  for (int it = 0; it < iterations; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = 0; b < k; ++b) {
        const double w = pi[a * k + b];
        for (std::size_t c = 0; c < k; ++c) next[b * k + c] += w * chain.prob(a, b, c);
      }
    pi.swap(next);
  }
  std::vector<double> u(k, 0.0);
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = 0; b < k; ++b) u[a] += pi[a * k + b];
  return u;
}

std::vector<double> unigram(std::span<const int> tokens, int vocab) {
  std::vector<double> f(static_cast<std::size_t>(vocab), 0.0);
  for (int t : tokens)
    if (t >= 0 && t < vocab) f[static_cast<std::size_t>(t)] += 1.0;
  if (!tokens.empty())
    for (auto& v : f) v /= static_cast<double>(tokens.size());
  return f;
}

double total_variation(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ShapeError("total_variation: lengths differ");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

}  // namespace lmoe
