// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace lmoe {

/// Which transformer blocks carry an MoE feed-forward instead of a dense one.
enum class MoePlacement { odd, even, all, none };

std::string to_string(MoePlacement p);
MoePlacement parse_moe_placement(const std::string& s);

struct ModelConfig {
  int layers = 4;
  int d_model = 64;
  int d_hidden = 256;
  int n_heads = 4;
  int d_head = 16;
  int vocab_size = 96;
  int max_seq_len = 128;
  int experts = 4;  // experts per MoE layer at construction
  MoePlacement moe_placement = MoePlacement::odd;
  double aux_coef = 0.01;
  double init_std = 0.02;

  bool is_moe_block(int index) const;
  bool has_moe() const;

  /// Every violated invariant, prefixed with `prefix` (empty when valid).
  std::vector<std::string> validate(const std::string& prefix = "model") const;

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace lmoe
