// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmoe/lifelong/lifelong.hpp"

#include <cmath>
#include <random>
#include <unordered_map>

#include "lmoe/numerics/ops.hpp"

namespace lmoe {

template <typename T>
std::vector<std::size_t> expand_experts(TransformerLM<T>& model, std::size_t new_e, SourcePolicy policy,
                                        double noise_sigma, int phase, std::uint64_t seed) {
  const std::size_t old_e = model.num_experts();
  if (model.moe_layers().empty()) throw ConfigError("expand_experts: model has no MoE layers");
  if (new_e < old_e) {
    throw ConfigError("expand_experts: cannot shrink from " + std::to_string(old_e) + " to " + std::to_string(new_e) +
                      " experts");
  }
  std::vector<std::size_t> sources;
  std::mt19937_64 pick(seed);
  for (std::size_t k = old_e; k < new_e; ++k) {
    if (policy == SourcePolicy::modulo) {
      sources.push_back(k % old_e);
    } else {
      sources.push_back(std::uniform_int_distribution<std::size_t>(0, old_e - 1)(pick));
    }
  }
  std::seed_seq ss{seed, std::uint64_t{0x6e6f697365}, static_cast<std::uint64_t>(phase)};
  std::mt19937_64 noise_rng(ss);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (auto* layer : model.moe_layers()) {
    for (std::size_t i = 0; i < sources.size(); ++i) {
      const std::size_t k = old_e + i, s = sources[i];
      auto expert = FeedForward<T>::copy_of(layer->expert(s), layer->expert_prefix(k), phase);
      std::vector<T> row = layer->gate_row(s).var.values();
      if (noise_sigma > 0.0) {
        for (auto& v : row) v = static_cast<T>(static_cast<double>(v) + noise_sigma * noise(noise_rng));
      }
      Shape shape{row.size()};
      Parameter<T> gate(layer->gate_row_name(k), Tensor<T>(std::move(shape), std::move(row)), phase);
      layer->append(std::move(expert), std::move(gate));
    }
  }
  return sources;
}

template <typename T>
void apply_freeze(TransformerLM<T>& model, FreezeMode mode, int phase) {
  for (auto* p : model.parameters()) p->trainable = true;
  const bool experts = mode == FreezeMode::experts_only || mode == FreezeMode::both;
  const bool gates = mode == FreezeMode::gatings_only || mode == FreezeMode::both;
  for (auto* layer : model.moe_layers()) {
    for (std::size_t e = 0; e < layer->size(); ++e) {
      auto& ex = layer->expert(e);
      if (experts && ex.origin_phase() < phase) ex.set_trainable(false);
      auto& g = layer->gate_row(e);
      if (gates && g.origin_phase < phase) g.trainable = false;
    }
  }
}

template <typename T>
Var<T> distill_loss(const Var<T>& student_logits, const Tensor<T>& teacher_logits, double temperature) {
  if (student_logits.shape() != teacher_logits.shape) {
    throw ShapeError("distill_loss: student " + shape_str(student_logits.shape()) + " and teacher " +
                     shape_str(teacher_logits.shape) + " logits differ");
  }
  if (!(temperature > 0.0)) throw ConfigError("distill_loss: temperature must be positive");
  const T inv_t = static_cast<T>(1.0 / temperature);
  Var<T> student = temperature == 1.0 ? student_logits : ops::scale(student_logits, inv_t);
  Tensor<T> scaled = teacher_logits;
  if (temperature != 1.0)
    for (auto& v : scaled.values) v *= inv_t;
  Tensor<T> p_t;
  {
    NoGradGuard no_grad;
    p_t = ops::softmax(Var<T>::constant(std::move(scaled))).tensor();
  }
  return ops::soft_cross_entropy(student, p_t);
}

double softmax_entropy(std::span<const double> logits, std::size_t cols) {
  if (cols == 0 || logits.size() % cols != 0 || logits.empty())
    throw ShapeError("softmax_entropy: " + std::to_string(logits.size()) + " values are not rows of " +
                     std::to_string(cols));
  const std::size_t rows = logits.size() / cols;
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = logits.data() + r * cols;
    double mx = x[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(x[j] - mx);
    const double lz = std::log(z);
    double h = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double lp = x[j] - mx - lz;
      h -= std::exp(lp) * lp;
    }
    total += h;
  }
  return total / static_cast<double>(rows);
}

template <typename T>
Tensor<T> Teacher<T>::logits(const TransformerLM<T>& current, std::span<const int> tokens, std::size_t batch,
                             std::size_t seq) const {
  NoGradGuard no_grad;
  if (mode_ == TeacherMode::snapshot) return snapshot_->forward(tokens, batch, seq).logits.tensor();
  ForwardOptions opt;
  opt.expert_limit = old_experts_;
  return current.forward(tokens, batch, seq, opt).logits.tensor();
}

template <typename T>
Teacher<T> make_teacher(const TransformerLM<T>& current, const TransformerLM<T>* snapshot, int phase,
                        TeacherMode mode) {
  if (phase < 1) throw ConfigError("make_teacher: no teacher exists in phase 0");
  if (mode == TeacherMode::snapshot && snapshot == nullptr)
    throw ConfigError("make_teacher: snapshot mode needs the previous phase's snapshot");
  std::size_t old_e = 0;
  auto layers = current.moe_layers();
  if (!layers.empty()) {
    for (std::size_t e = 0; e < layers[0]->size(); ++e)
      if (layers[0]->expert(e).origin_phase() < phase) ++old_e;
  }
  if (mode == TeacherMode::live_old_experts && !layers.empty() && old_e < 2)
    throw ConfigError("make_teacher: live_old_experts needs at least 2 experts from earlier phases");
  return Teacher<T>(mode, snapshot, old_e);
}

template <typename T>
Var<T> l2_anchor_loss(const TransformerLM<T>& model, const TransformerLM<T>& snapshot, double lambda) {
  std::unordered_map<std::string, const Parameter<T>*> anchor;
  for (const auto* p : snapshot.parameters()) anchor[p->name] = p;
  Var<T> total;
  for (const auto* p : model.parameters()) {
    auto it = anchor.find(p->name);
    if (it == anchor.end()) continue;
    if (it->second->shape() != p->shape()) {
      throw ShapeError("l2_anchor_loss: " + p->name + " has shape " + shape_str(p->shape()) + " but snapshot has " +
                       shape_str(it->second->shape()));
    }
    auto d = ops::squared_distance(p->var, it->second->tensor());
    total = total.defined() ? ops::add(total, d) : d;
  }
  if (!total.defined()) return Var<T>::constant(Tensor<T>::scalar(T(0)));
  return ops::scale(total, static_cast<T>(lambda));
}

template <typename T>
CompositeLoss<T> composite_loss(const TransformerLM<T>& model, const LossBatch& batch, const StrategyConfig& strategy,
                                int phase, const Teacher<T>* teacher, const TransformerLM<T>* anchor,
                                const ForwardOptions& options) {
  const double lambda = strategy.lambda_at(phase);
  if (lambda > 0.0 && teacher == nullptr)
    throw ConfigError("composite_loss: distillation weight " + std::to_string(lambda) + " needs a teacher");
  const bool use_l2 = strategy.kind == StrategyKind::l2_anchor && phase >= 1;
  if (use_l2 && anchor == nullptr) throw ConfigError("composite_loss: l2_anchor needs the previous phase's snapshot");

  CompositeLoss<T> out;
  auto fwd = model.forward(batch.inputs, batch.batch, batch.seq, options);
  out.expert_load = std::move(fwd.expert_load);
  auto perp = ops::cross_entropy(fwd.logits, batch.targets);
  LossBreakdown& b = out.breakdown;
  b.lambda = lambda;
  T total_v = perp.item();
  b.perp = static_cast<double>(perp.item());
  Var<T> total = perp;
  if (lambda > 0.0) {
    auto target = teacher->logits(model, batch.inputs, batch.batch, batch.seq);
    auto kl = distill_loss(fwd.logits, target, strategy.distill.temperature);
    auto weighted = ops::scale(kl, static_cast<T>(lambda));
    total = ops::add(total, weighted);
    b.kl = static_cast<double>(kl.item());
    total_v = total_v + weighted.item();
  }
  if (use_l2) {
    auto l2 = l2_anchor_loss(model, *anchor, strategy.l2_lambda);
    total = ops::add(total, l2);
    b.l2 = static_cast<double>(l2.item());
    total_v = total_v + l2.item();
  }
  if (fwd.aux.defined() && model.config().aux_coef > 0.0) {
    auto aux = ops::scale(fwd.aux, static_cast<T>(model.config().aux_coef));
    total = ops::add(total, aux);
    b.aux = static_cast<double>(aux.item());
    total_v = total_v + aux.item();
  }
  b.total = static_cast<double>(total_v);
  if (!std::isfinite(b.total)) {
    throw NumericError("non-finite loss: perp=" + std::to_string(b.perp) + " kl=" + std::to_string(b.kl) +
                       " l2=" + std::to_string(b.l2) + " aux=" + std::to_string(b.aux));
  }
  out.total = total;
  return out;
}

#define LMOE_INSTANTIATE(T)                                                                                     \
  template std::vector<std::size_t> expand_experts<T>(TransformerLM<T>&, std::size_t, SourcePolicy, double, int, \
                                                      std::uint64_t);                                          \
  template void apply_freeze<T>(TransformerLM<T>&, FreezeMode, int);                                           \
  template Var<T> distill_loss<T>(const Var<T>&, const Tensor<T>&, double);                                    \
  template class Teacher<T>;                                                                                   \
  template Teacher<T> make_teacher<T>(const TransformerLM<T>&, const TransformerLM<T>*, int, TeacherMode);     \
  template Var<T> l2_anchor_loss<T>(const TransformerLM<T>&, const TransformerLM<T>&, double);                 \
  template CompositeLoss<T> composite_loss<T>(const TransformerLM<T>&, const LossBatch&, const StrategyConfig&, \
                                              int, const Teacher<T>*, const TransformerLM<T>*,                  \
                                              const ForwardOptions&);

LMOE_INSTANTIATE(float)
LMOE_INSTANTIATE(double)
#undef LMOE_INSTANTIATE

}  // namespace lmoe
