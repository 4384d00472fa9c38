// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmoe/evalkit/evalkit.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace lmoe {

namespace fs = std::filesystem;

EvalResult score_logits(std::span<const double> logits, std::size_t vocab, std::span<const int> targets) {
  if (vocab == 0 || logits.size() != targets.size() * vocab)
    throw ShapeError("score_logits: " + std::to_string(logits.size()) + " logits for " +
                     std::to_string(targets.size()) + " targets of vocabulary " + std::to_string(vocab));
  EvalResult r;
  double nll = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double* x = logits.data() + i * vocab;
    std::size_t arg = 0;
    for (std::size_t j = 1; j < vocab; ++j)
      if (x[j] > x[arg]) arg = j;
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(x[j] - x[arg]);
    const auto t = static_cast<std::size_t>(targets[i]);
    if (t >= vocab) throw ShapeError("score_logits: target " + std::to_string(targets[i]) + " outside the vocabulary");
    nll += std::log(z) - (x[t] - x[arg]);
    if (arg == t) ++hits;
  }
  r.tokens = targets.size();
  if (r.tokens == 0) throw ConfigError("score_logits: no tokens");
  r.mean_nll = nll / static_cast<double>(r.tokens);
  r.ppl = std::exp(r.mean_nll);
  r.acc = static_cast<double>(hits) / static_cast<double>(r.tokens);
  return r;
}

template <typename T>
EvalResult evaluate(const TransformerLM<T>& model, const std::vector<Batch>& set) {
  if (set.empty()) throw ConfigError("evaluate: empty eval set");
  NoGradGuard no_grad;
  double nll = 0.0;
  double hits = 0.0;
  std::size_t tokens = 0;
  const auto vocab = static_cast<std::size_t>(model.config().vocab_size);
  std::vector<double> logits;
  for (const auto& b : set) {
    const auto inputs = b.inputs();
    const auto targets = b.targets();
    auto out = model.forward(inputs, b.rows, b.seq).logits;
    logits.assign(out.values().begin(), out.values().end());
    const auto r = score_logits(logits, vocab, targets);
    nll += r.mean_nll * static_cast<double>(r.tokens);
    hits += r.acc * static_cast<double>(r.tokens);
    tokens += r.tokens;
  }
  EvalResult r;
  r.tokens = tokens;
  r.mean_nll = nll / static_cast<double>(tokens);
  r.ppl = std::exp(r.mean_nll);
  r.acc = std::round(hits) / static_cast<double>(tokens);
  return r;
}

double forgetting_drop(double best, double later, bool higher_is_better) {
  if (!(best > 0.0)) throw ConfigError("forgetting_drop: best must be positive (got " + std::to_string(best) + ")");
  return higher_is_better ? 100.0 * (later - best) / best : 100.0 * (best - later) / best;
}

std::string to_jsonl(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["phase"] = r.phase;
  j["dist"] = r.dist;
  j["ppl"] = r.ppl;
  j["acc"] = r.acc;
  j["l_perp"] = r.l_perp;
  j["l_kl"] = r.l_kl;
  j["l_l2"] = r.l_l2;
  j["l_aux"] = r.l_aux;
  j["experts"] = r.experts;
  return j.dump();
}

MetricsRecord parse_jsonl_line(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  MetricsRecord r;
  r.step = j.at("step").get<long>();
  r.phase = j.at("phase").get<int>();
  r.dist = j.at("dist").get<std::string>();
  r.ppl = j.at("ppl").get<double>();
  r.acc = j.at("acc").get<double>();
  r.l_perp = j.at("l_perp").get<double>();
  r.l_kl = j.at("l_kl").get<double>();
  r.l_l2 = j.at("l_l2").get<double>();
  r.l_aux = j.at("l_aux").get<double>();
  r.experts = j.at("experts").get<int>();
  return r;
}

ParsedMetrics read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  ParsedMetrics out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.records.push_back(parse_jsonl_line(line));
    } catch (const std::exception&) {
      ++out.skipped;
    }
  }
  return out;
}

const ForgettingRow* ForgettingReport::find(const std::string& dist, int phase) const {
  for (const auto& r : rows)
    if (r.dist == dist && r.phase == phase) return &r;
  return nullptr;
}

const ForgettingRow* ForgettingReport::final_row(const std::string& dist) const {
  const ForgettingRow* best = nullptr;
  for (const auto& r : rows)
    if (r.dist == dist && (best == nullptr || r.phase > best->phase)) best = &r;
  return best;
}

ForgettingReport build_report(const std::vector<MetricsRecord>& records, const std::map<std::string, int>& own_phase) {
  ForgettingReport rep;
  std::vector<std::string> dists;
  std::map<int, long> phase_end;
  for (const auto& r : records) {
    if (std::find(dists.begin(), dists.end(), r.dist) == dists.end()) dists.push_back(r.dist);
    auto it = phase_end.find(r.phase);
    if (it == phase_end.end() || r.step > it->second) phase_end[r.phase] = r.step;
  }
  for (std::size_t i = 0; i < dists.size(); ++i) {
    auto it = own_phase.find(dists[i]);
    rep.own_phase[dists[i]] = it != own_phase.end() ? it->second : static_cast<int>(i);
  }
  for (const auto& d : dists) {
    const MetricsRecord* base = nullptr;
    std::vector<const MetricsRecord*> ends;
    for (const auto& [phase, step] : phase_end) {
      for (const auto& r : records) {
        if (r.dist == d && r.phase == phase && r.step == step) {
          ends.push_back(&r);
          if (phase == rep.own_phase[d]) base = &r;
          break;
        }
      }
    }
    for (const auto* r : ends) {
      ForgettingRow row;
      row.dist = d;
      row.phase = r->phase;
      row.step = r->step;
      row.ppl = r->ppl;
      row.acc = r->acc;
      if (base != nullptr && r->phase >= base->phase) {
        row.ppl_drop_pct = forgetting_drop(base->ppl, r->ppl, false);
        if (base->acc > 0.0) row.acc_drop_pct = forgetting_drop(base->acc, r->acc, true);
        row.ppl_ratio = r->ppl / base->ppl;
      }
      rep.rows.push_back(row);
    }
  }
  return rep;
}

std::string format_g6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

namespace {

std::string opt_g6(const std::optional<double>& v) { return v ? format_g6(*v) : std::string(); }

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("short write to " + path.string());
}

}  // namespace

std::string summary_csv(const ForgettingReport& report) {
  std::ostringstream s;
  s << "dist,phase,step,ppl,acc,ppl_drop_pct,acc_drop_pct,ppl_ratio\n";
  for (const auto& r : report.rows) {
    s << r.dist << ',' << r.phase << ',' << r.step << ',' << format_g6(r.ppl) << ',' << format_g6(r.acc) << ','
      << opt_g6(r.ppl_drop_pct) << ',' << opt_g6(r.acc_drop_pct) << ',' << opt_g6(r.ppl_ratio) << '\n';
  }
  return s.str();
}

std::string report_csv(const std::vector<MetricsRecord>& records) {
  std::ostringstream s;
  s << "step,dist,ppl,acc\n";
  for (const auto& r : records) s << r.step << ',' << r.dist << ',' << format_g6(r.ppl) << ',' << format_g6(r.acc) << '\n';
  return s.str();
}

void emit_report(const std::vector<MetricsRecord>& records, const fs::path& out_dir,
                 const std::map<std::string, int>& own_phase) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());
  std::string jsonl;
  for (const auto& r : records) jsonl += to_jsonl(r) + "\n";
  write_file(out_dir / "metrics.jsonl", jsonl);
  write_file(out_dir / "report.csv", report_csv(records));
  write_file(out_dir / "summary.csv", summary_csv(build_report(records, own_phase)));
}

std::string forgetting_table(const ForgettingReport& report) {
  std::ostringstream s;
  char line[160];
  std::snprintf(line, sizeof(line), "%-8s %5s %8s %10s %8s %10s %8s\n", "dist", "phase", "step", "ppl", "acc",
                "ppl_drop%", "ratio");
  s << line;
  for (const auto& r : report.rows) {
    std::snprintf(line, sizeof(line), "%-8s %5d %8ld %10.4f %8.4f %10s %8s\n", r.dist.c_str(), r.phase, r.step, r.ppl,
                  r.acc, opt_g6(r.ppl_drop_pct).c_str(), opt_g6(r.ppl_ratio).c_str());
    s << line;
  }
  return s.str();
}

std::vector<ComparisonRow> comparison_rows(const std::string& run, const ForgettingReport& report) {
  std::vector<ComparisonRow> out;
  for (const auto& [dist, own] : report.own_phase) {
    const auto* base = report.find(dist, own);
    const auto* last = report.final_row(dist);
    if (base == nullptr || last == nullptr) continue;
    out.push_back({run, dist, base->ppl, last->ppl, forgetting_drop(base->ppl, last->ppl, false), last->ppl / base->ppl});
  }
  return out;
}

std::string comparison_csv(const std::vector<ComparisonRow>& rows) {
  std::ostringstream s;
  s << "run,dist,own_ppl,final_ppl,ppl_drop_pct,ppl_ratio\n";
  for (const auto& r : rows) {
    s << r.run << ',' << r.dist << ',' << format_g6(r.own_ppl) << ',' << format_g6(r.final_ppl) << ','
      << format_g6(r.ppl_drop_pct) << ',' << format_g6(r.ppl_ratio) << '\n';
  }
  return s.str();
}

template EvalResult evaluate<float>(const TransformerLM<float>&, const std::vector<Batch>&);
template EvalResult evaluate<double>(const TransformerLM<double>&, const std::vector<Batch>&);

}  // namespace lmoe
