// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmoe/trainer/trainer.hpp"

#include <malloc.h>

#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include "lmoe/model/checkpoint.hpp"

namespace lmoe {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text, bool append = false) {
  std::ofstream out(path, std::ios::binary | (append ? std::ios::app : std::ios::trunc));
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

nlohmann::json breakdown_json(const LossBreakdown& b) {
  return {{"total", b.total}, {"perp", b.perp}, {"kl", b.kl}, {"l2", b.l2}, {"aux", b.aux}, {"lambda", b.lambda}};
}

LossBreakdown breakdown_from(const nlohmann::json& j) {
  LossBreakdown b;
  b.total = j.at("total").get<double>();
  b.perp = j.at("perp").get<double>();
  b.kl = j.at("kl").get<double>();
  b.l2 = j.at("l2").get<double>();
  b.aux = j.at("aux").get<double>();
  b.lambda = j.at("lambda").get<double>();
  return b;
}

std::uint64_t phase_seed(std::uint64_t seed, int phase) {
  return seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(phase + 1);
}

}  // namespace

template <typename T>
Trainer<T>::Trainer(ExperimentConfig config, fs::path run_dir) : config_(std::move(config)), run_dir_(std::move(run_dir)) {
  auto errs = config_.validate();
  if (!errs.empty()) {
    std::string msg;
    for (const auto& e : errs) msg += (msg.empty() ? "" : "\n") + e;
    throw ConfigError(msg);
  }
  model_ = std::make_unique<TransformerLM<T>>(config_.model, config_.seeds.init);
  init_common();
  write_text(run_dir_ / "config.json", dump_experiment(config_));
  write_text(run_dir_ / "metrics.jsonl", "");
  write_text(run_dir_ / "events.log", "");
  for (const auto& w : config_.warnings()) log_event({0, 0, "warning: " + w});
}

template <typename T>
void Trainer<T>::init_common() {
  fs::create_directories(run_dir_);
  stream_ = std::make_unique<DataStream>(config_.plan, config_.seeds.data, config_.replay_mode);
  eval_sets_.clear();
  for (std::size_t d = 0; d < stream_->distributions().size(); ++d)
    eval_sets_.push_back(stream_->eval_set(static_cast<int>(d), config_.trainer.eval_batches));
}

template <typename T>
Trainer<T> Trainer<T>::resume(const fs::path& checkpoint, const fs::path& run_dir) {
  const auto manifest = read_manifest(checkpoint);
  if (!manifest.contains("trainer")) throw CheckpointError(checkpoint.string() + " holds no trainer state");
  const auto& st = manifest.at("trainer");
  Trainer t;
  t.config_ = st.at("config").get<ExperimentConfig>();
  t.run_dir_ = run_dir;
  t.model_ = std::make_unique<TransformerLM<T>>(load_model<T>(checkpoint));
  if (st.at("has_snapshot").get<bool>())
    t.snapshot_ = std::make_unique<TransformerLM<T>>(load_model<T>(checkpoint / "snapshot"));
  t.optimizer_.load(checkpoint / "optimizer", st.at("optimizer"));
  t.phase_ = st.at("phase").get<int>();
  t.step_ = st.at("step").get<std::size_t>();
  t.global_step_ = st.at("global_step").get<long>();
  t.phase_started_ = st.at("phase_started").get<bool>();
  t.aborted_ = st.at("aborted").get<int>();
  t.last_eval_step_ = st.at("last_eval_step").get<long>();
  t.last_ = breakdown_from(st.at("last"));
  for (const auto& line : st.at("records")) t.records_.push_back(parse_jsonl_line(line.get<std::string>()));
  for (const auto& e : st.at("events"))
    t.events_.push_back({e.at("step").get<long>(), e.at("phase").get<int>(), e.at("message").get<std::string>()});
  t.init_common();
  if (t.phase_started_ && t.config_.strategy.lambda_at(t.phase_) > 0.0)
    t.teacher_ = make_teacher(*t.model_, t.snapshot_.get(), t.phase_, t.config_.strategy.distill.teacher);
  write_text(run_dir / "config.json", dump_experiment(t.config_));
  std::string jsonl;
  for (const auto& r : t.records_) jsonl += to_jsonl(r) + "\n";
  write_text(run_dir / "metrics.jsonl", jsonl);
  std::string log;
  for (const auto& e : t.events_)
    log += std::to_string(e.step) + " phase " + std::to_string(e.phase) + ": " + e.message + "\n";
  write_text(run_dir / "events.log", log);
  return t;
}

template <typename T>
std::map<std::string, int> Trainer<T>::own_phases() const {
  std::map<std::string, int> out;
  for (std::size_t p = 0; p < stream_->phases(); ++p) {
    const auto& id = stream_->distributions()[static_cast<std::size_t>(stream_->phase_distribution(static_cast<int>(p)))]->id();
    out.emplace(id, static_cast<int>(p));
  }
  return out;
}

template <typename T>
void Trainer<T>::begin_phase() {
  if (phase_started_) return;
  if (finished()) throw ConfigError("trainer: all " + std::to_string(config_.plan.phases.size()) + " phases are done");
  const auto& strategy = config_.strategy;
  teacher_.reset();
  if (phase_ >= 1) snapshot_ = std::make_unique<TransformerLM<T>>(model_->clone());
  const auto target = static_cast<std::size_t>(strategy.experts_at(phase_, config_.model.experts));
  if (model_->config().has_moe() && target > model_->num_experts()) {
    expand_experts(*model_, target, strategy.schedule.policy, strategy.schedule.noise_sigma, phase_,
                   phase_seed(config_.seeds.noise, phase_));
  }
  apply_freeze(*model_, strategy.kind == StrategyKind::lifelong_moe ? strategy.freeze : FreezeMode::none, phase_);
  if (config_.trainer.reset_optimizer) optimizer_.clear();
  optimizer_.release_frozen(model_->parameters());
  if (strategy.lambda_at(phase_) > 0.0)
    teacher_ = make_teacher(*model_, snapshot_.get(), phase_, strategy.distill.teacher);
  phase_started_ = true;
}

template <typename T>
void Trainer<T>::log_event(const TrainEvent& e) const {
  write_text(run_dir_ / "events.log", std::to_string(e.step) + " phase " + std::to_string(e.phase) + ": " + e.message + "\n",
             true);
}

template <typename T>
void Trainer<T>::abort_step(const std::string& why) {
  ++aborted_;
  TrainEvent e{global_step_, phase_, "aborted step: " + why};
  events_.push_back(e);
  log_event(e);
  if (aborted_ > kAbortBudget) {
    throw NumericError("giving up after " + std::to_string(aborted_) + " aborted steps; last: " + why);
  }
}

template <typename T>
LossBreakdown Trainer<T>::train_step() {
  begin_phase();
  if (step_ >= config_.plan.steps_per_phase) throw ConfigError("trainer: phase " + std::to_string(phase_) + " is complete");
  const auto start = std::chrono::steady_clock::now();
  const Batch batch = stream_->next_batch(phase_, step_, config_.strategy);
  const auto inputs = batch.inputs();
  const auto targets = batch.targets();
  auto params = model_->parameters();
  zero_grads(params);
  LossBreakdown out;
  bool ok = true;
  try {
    auto loss = composite_loss(*model_, LossBatch{inputs, targets, batch.rows, batch.seq}, config_.strategy, phase_,
                               teacher_ ? &*teacher_ : nullptr, snapshot_.get());
    out = loss.breakdown;
    backward(loss.total);
    optimizer_.step(params, lr_at(static_cast<long>(step_) + 1, config_.trainer.lr));
  } catch (const NumericError& e) {
    ok = false;
    out.total = std::nan("");
    abort_step(e.what());
  }
  ++step_;
  ++global_step_;
  if (ok) last_ = out;
  step_seconds_[phase_].push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  if (on_step) on_step(*this, out);
  return out;
}

template <typename T>
void Trainer<T>::append_metrics(const MetricsRecord& r) const {
  write_text(run_dir_ / "metrics.jsonl", to_jsonl(r) + "\n", true);
}

template <typename T>
void Trainer<T>::record_eval() {
  for (std::size_t d = 0; d < eval_sets_.size(); ++d) {
    const auto res = evaluate(*model_, eval_sets_[d]);
    MetricsRecord r;
    r.step = global_step_;
    r.phase = phase_;
    r.dist = stream_->distributions()[d]->id();
    r.ppl = res.ppl;
    r.acc = res.acc;
    r.l_perp = last_.perp;
    r.l_kl = last_.kl;
    r.l_l2 = last_.l2;
    r.l_aux = last_.aux;
    r.experts = static_cast<int>(model_->num_experts());
    records_.push_back(r);
    append_metrics(r);
  }
  last_eval_step_ = global_step_;
}

template <typename T>
void Trainer<T>::run_phase() {
  begin_phase();
  const std::size_t steps = config_.plan.steps_per_phase;
  while (step_ < steps) {
    train_step();
    if (step_ % config_.trainer.eval_interval == 0) record_eval();
  }
  if (last_eval_step_ != global_step_) record_eval();
  if (config_.trainer.save_checkpoints)
    save_checkpoint(run_dir_ / "checkpoints" / ("phase_" + std::to_string(phase_)));
  ++phase_;
  step_ = 0;
  phase_started_ = false;
}

template <typename T>
ForgettingReport Trainer<T>::run() {
  try {
    while (!finished()) run_phase();
  } catch (const std::exception& e) {
    nlohmann::json err{{"phase", phase_}, {"step", global_step_}, {"error", e.what()}};
    write_text(run_dir_ / "error.json", err.dump(2) + "\n");
    throw;
  }
  const auto own = own_phases();
  emit_report(records_, run_dir_, own);
  return build_report(records_, own);
}

template <typename T>
void Trainer<T>::save_checkpoint(const fs::path& dir) const {
  fs::remove_all(dir);
  nlohmann::json st;
  st["config"] = config_;
  st["phase"] = phase_;
  st["step"] = step_;
  st["global_step"] = global_step_;
  st["phase_started"] = phase_started_;
  st["aborted"] = aborted_;
  st["last_eval_step"] = last_eval_step_;
  st["last"] = breakdown_json(last_);
  st["precision"] = precision_name(std::is_same_v<T, double> ? Precision::f64 : Precision::f32);
  auto recs = nlohmann::json::array();
  for (const auto& r : records_) recs.push_back(to_jsonl(r));
  st["records"] = std::move(recs);
  auto evs = nlohmann::json::array();
  for (const auto& e : events_) evs.push_back({{"step", e.step}, {"phase", e.phase}, {"message", e.message}});
  st["events"] = std::move(evs);
  st["has_snapshot"] = snapshot_ != nullptr;
  st["optimizer"] = optimizer_.save(dir / "optimizer");
  if (snapshot_) save_model(*snapshot_, dir / "snapshot");
  save_model(*model_, dir, nlohmann::json{{"trainer", st}});
}

template class Trainer<float>;
template class Trainer<double>;

ForgettingReport run_experiment(const ExperimentConfig& config, const fs::path& run_dir) {
  if (config.trainer.precision == Precision::f64) return Trainer<double>(config, run_dir).run();
  return Trainer<float>(config, run_dir).run();
}

void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

void run_parallel(const std::vector<std::function<void()>>& jobs, unsigned workers) {
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(jobs.size())));
  std::atomic<std::size_t> next{0};
  std::exception_ptr first;
  std::mutex mu;
  auto work = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        jobs[i]();
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!first) first = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

}  // namespace lmoe
