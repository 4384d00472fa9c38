// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lmoe/lifelong/strategy.hpp"
#include "lmoe/model/transformer.hpp"

namespace lmoe {

/// Appends experts to every MoE layer until it holds `new_e`. New expert k
/// copies expert s(k) bitwise (modulo: s(k) = k mod E_old; seeded_uniform:
/// uniform draw from a generator seeded with `seed`); its gating row is the
/// source row plus N(0, noise_sigma²) noise. New parameters are trainable and
/// tagged `phase`. Returns the source index of every appended expert (same
/// for all layers). Throws ConfigError when new_e < E.
template <typename T>
std::vector<std::size_t> expand_experts(TransformerLM<T>& model, std::size_t new_e, SourcePolicy policy,
                                        double noise_sigma, int phase, std::uint64_t seed);

/// Marks old experts and/or gating rows (origin_phase < phase) non-trainable;
/// everything else trainable.
template <typename T>
void apply_freeze(TransformerLM<T>& model, FreezeMode mode, int phase);

/// Mean over rows of −Σ_v p_T(v)·log p_S(v), p = softmax(logits / temperature).
/// The teacher side is a constant.
template <typename T>
Var<T> distill_loss(const Var<T>& student_logits, const Tensor<T>& teacher_logits, double temperature = 1.0);

/// Mean softmax entropy of the rows of `logits`.
double softmax_entropy(std::span<const double> logits, std::size_t cols);

/// Output distribution source for distillation. Snapshot mode runs the frozen
/// end-of-previous-phase model; live_old_experts runs the current model
/// restricted to the experts that existed before `phase`. Neither records a
/// graph.
template <typename T>
class Teacher {
 public:
  Teacher(TeacherMode mode, const TransformerLM<T>* snapshot, std::size_t old_experts)
      : mode_(mode), snapshot_(snapshot), old_experts_(old_experts) {}

  TeacherMode mode() const { return mode_; }
  std::size_t old_experts() const { return old_experts_; }

  Tensor<T> logits(const TransformerLM<T>& current, std::span<const int> tokens, std::size_t batch,
                   std::size_t seq) const;

 private:
  TeacherMode mode_;
  const TransformerLM<T>* snapshot_;
  std::size_t old_experts_;
};

/// Throws ConfigError at phase 0 or when snapshot mode has no snapshot.
template <typename T>
Teacher<T> make_teacher(const TransformerLM<T>& current, const TransformerLM<T>* snapshot, int phase, TeacherMode mode);

/// λ·Σ‖W − W_snapshot‖² over parameters present in both (matched by name).
/// Throws ShapeError when a matched pair differs in shape.
template <typename T>
Var<T> l2_anchor_loss(const TransformerLM<T>& model, const TransformerLM<T>& snapshot, double lambda);

/// Scalar values of one composite loss evaluation. `aux` already includes
/// the model's aux coefficient and `l2` its λ, so
/// total == ((perp + lambda·kl) + l2) + aux in the model's precision.
struct LossBreakdown {
  double total = 0.0;
  double perp = 0.0;
  double kl = 0.0;
  double l2 = 0.0;
  double aux = 0.0;
  double lambda = 0.0;

  bool operator==(const LossBreakdown&) const = default;
};

template <typename T>
struct CompositeLoss {
  Var<T> total;
  LossBreakdown breakdown;
  std::vector<std::vector<std::size_t>> expert_load;
};

/// One batch: `batch` rows of inputs and next-token targets, `seq` each.
struct LossBatch {
  std::span<const int> inputs;
  std::span<const int> targets;
  std::size_t batch = 0;
  std::size_t seq = 0;
};

/// L = L_Perp + λ·L_KL + l2 + aux_coef·aux for `strategy` at `phase`.
/// Throws ConfigError when λ > 0 without a teacher or l2 is active without an anchor.
template <typename T>
CompositeLoss<T> composite_loss(const TransformerLM<T>& model, const LossBatch& batch, const StrategyConfig& strategy,
                                int phase, const Teacher<T>* teacher, const TransformerLM<T>* anchor,
                                const ForwardOptions& options = {});

}  // namespace lmoe
