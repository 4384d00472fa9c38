// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lmoe/numerics/parameter.hpp"

namespace lmoe {

/// gelu(x·W1 + b1)·W2 + b2. Used both as the dense FFN and as an MoE expert;
/// all four parameters share one origin phase and one trainable flag.
template <typename T>
struct FeedForward {
  Parameter<T> w1, b1, w2, b2;

  static FeedForward init(const std::string& prefix, std::size_t d_model, std::size_t d_hidden, double init_std,
                          std::mt19937_64& rng, int origin_phase);

  /// Bitwise copy of `source` under new names and a new origin phase.
  static FeedForward copy_of(const FeedForward& source, const std::string& prefix, int origin_phase);

  Var<T> forward(const Var<T>& x) const;

  int origin_phase() const { return w1.origin_phase; }
  bool trainable() const { return w1.trainable; }
  void set_trainable(bool on);
  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
};

/// Routing of one token: gate probabilities, the two selected experts and
/// their renormalised combine weights.
struct GateDecision {
  std::vector<double> probs;
  std::size_t first = 0;
  std::size_t second = 1;
  double w1 = 0.5;
  double w2 = 0.5;
};

/// Indices of the two largest entries of `probs`; ties go to the lower index.
std::pair<std::size_t, std::size_t> select_top2(std::span<const double> probs);

template <typename T>
std::pair<std::size_t, std::size_t> select_top2(std::span<const T> probs);

/// Routes one token `x` (length M) through a gate weight [E×M].
/// Throws NumericError on non-finite logits and ShapeError when E < 2.
template <typename T>
GateDecision gate_route(std::span<const T> x, const Tensor<T>& gate_weight, const std::string& layer = "gate");

/// Selected experts of every token in one MoE layer for one forward pass.
struct LayerRoute {
  std::vector<std::size_t> first;
  std::vector<std::size_t> second;
};

/// Per-layer routes of a forward pass; recorded once and replayed to hold the
/// discrete top-2 selection fixed (finite-difference checks).
struct RoutingTrace {
  std::vector<LayerRoute> layers;
};

template <typename T>
struct MoEOutput {
  Var<T> output;
  Var<T> probs;                   // [tokens × E] gate probabilities
  LayerRoute route;
  std::vector<std::size_t> load;  // tokens routed to each expert (either slot)
};

/// E feed-forward experts plus an E×M gating weight stored as one parameter
/// per row, so row e pairs with expert e and carries its origin phase.
/// Expansion only appends; expert order is stable.
template <typename T>
class MoELayer {
 public:
  MoELayer() = default;
  MoELayer(std::string prefix, std::size_t d_model, std::size_t d_hidden, std::size_t experts, double init_std,
           std::mt19937_64& rng);

  std::size_t size() const { return experts_.size(); }
  const std::string& prefix() const { return prefix_; }
  std::size_t d_model() const { return d_model_; }

  FeedForward<T>& expert(std::size_t e) { return experts_.at(e); }
  const FeedForward<T>& expert(std::size_t e) const { return experts_.at(e); }
  Parameter<T>& gate_row(std::size_t e) { return gate_rows_.at(e); }
  const Parameter<T>& gate_row(std::size_t e) const { return gate_rows_.at(e); }

  /// Gating weight [E×M] assembled from the rows.
  Tensor<T> gate_weight() const;

  std::string expert_prefix(std::size_t e) const;
  std::string gate_row_name(std::size_t e) const;

  /// Appends an expert and its gating row (both must be named for index size()).
  void append(FeedForward<T> expert, Parameter<T> gate_row);

  /// Top-2 MoE over token rows x [n×M]. `expert_limit` > 0 restricts routing
  /// to the first `expert_limit` experts. With `replay`, the selected pair of
  /// every token is taken from it instead of being recomputed.
  MoEOutput<T> forward(const Var<T>& x, std::size_t expert_limit = 0, const LayerRoute* replay = nullptr) const;

  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;

  MoELayer clone() const;

 private:
  std::string prefix_;
  std::size_t d_model_ = 0;
  std::size_t d_hidden_ = 0;
  std::vector<FeedForward<T>> experts_;
  std::vector<Parameter<T>> gate_rows_;
};

/// GShard-style balance loss E·Σ_e f_e·p̄_e, with f_e the fraction of tokens
/// whose first choice is e and p̄_e the mean gate probability of e. Equals 1
/// for perfectly uniform routing. f is treated as constant.
template <typename T>
Var<T> load_balance_aux(const Var<T>& probs, std::span<const std::size_t> first_choice);

/// Deep copy of a parameter (new graph leaf, same name and metadata).
template <typename T>
Parameter<T> clone_parameter(const Parameter<T>& p);

}  // namespace lmoe
