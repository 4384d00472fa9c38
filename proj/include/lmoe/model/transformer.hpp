// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lmoe/model/config.hpp"
#include "lmoe/model/moe.hpp"

namespace lmoe {

template <typename T>
struct TransformerBlock {
  Parameter<T> ln1_gamma, ln1_beta;
  Parameter<T> wq, wk, wv, wo;
  Parameter<T> ln2_gamma, ln2_beta;
  std::optional<FeedForward<T>> ffn;  // dense blocks
  std::optional<MoELayer<T>> moe;     // MoE blocks
};

struct ForwardOptions {
  /// Route only among the first `expert_limit` experts of every MoE layer (0 = all).
  std::size_t expert_limit = 0;
  /// When set, the routes taken are written here.
  RoutingTrace* record = nullptr;
  /// When set, routes are replayed from here instead of selected.
  const RoutingTrace* replay = nullptr;
};

template <typename T>
struct ForwardResult {
  Var<T> logits;  // [batch·seq × vocab]
  Var<T> aux;     // mean load-balance loss over MoE layers; undefined without MoE
  std::vector<std::vector<std::size_t>> expert_load;  // per MoE layer
};

/// Decoder-only LM: learned token and position embeddings, pre-layernorm
/// blocks with causal multi-head attention and either a dense FFN or a top-2
/// MoE (per ModelConfig::moe_placement), final layernorm, and an output
/// projection tied to the token embedding.
template <typename T>
class TransformerLM {
 public:
  /// `experts` overrides config.experts for the MoE layers (used when
  /// restoring an expanded model); config() still reports config.experts.
  TransformerLM(const ModelConfig& config, std::uint64_t seed, std::size_t experts = 0);

  const ModelConfig& config() const { return config_; }

  /// Experts per MoE layer (0 for a dense model).
  std::size_t num_experts() const;

  /// tokens holds `batch` rows of `seq` ids. Throws ShapeError on an
  /// out-of-range id (naming its position) or seq > max_seq_len.
  ForwardResult<T> forward(std::span<const int> tokens, std::size_t batch, std::size_t seq,
                           const ForwardOptions& options = {}) const;

  /// Logits [len × vocab] for a single sequence.
  Var<T> lm_forward(std::span<const int> tokens) const;

  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
  Parameter<T>* find(const std::string& name);
  const Parameter<T>* find(const std::string& name) const;

  std::vector<MoELayer<T>*> moe_layers();
  std::vector<const MoELayer<T>*> moe_layers() const;

  /// Independent deep copy (own graph leaves).
  TransformerLM clone() const;

 private:
  TransformerLM() = default;

  ModelConfig config_;
  Parameter<T> tok_emb_, pos_emb_;
  std::vector<TransformerBlock<T>> blocks_;
  Parameter<T> lnf_gamma_, lnf_beta_;
};

/// Parameter-name classification used by freezing and reporting.
bool is_expert_param(const std::string& name);
bool is_gate_param(const std::string& name);

struct ActivatedParams {
  std::size_t per_token_expert_activated = 0;  // per MoE layer: 2·(2·M·H + H + M)
  std::size_t moe_layers = 0;
  std::size_t dense = 0;      // dense FFN blocks
  std::size_t attention = 0;  // q/k/v/o projections
  std::size_t norm = 0;       // layernorm gains and biases
  std::size_t gating = 0;     // all gating rows
  std::size_t embedding = 0;  // token + position (output projection is tied)
  std::size_t total = 0;      // every stored parameter
};

template <typename T>
ActivatedParams count_activated_params(const TransformerLM<T>& model);

}  // namespace lmoe
