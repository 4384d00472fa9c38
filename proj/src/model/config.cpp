// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmoe/model/config.hpp"

#include <cmath>

#include "lmoe/common/error.hpp"

namespace lmoe {

std::string to_string(MoePlacement p) {
  switch (p) {
    case MoePlacement::odd: return "odd";
    case MoePlacement::even: return "even";
    case MoePlacement::all: return "all";
    case MoePlacement::none: return "none";
  }
  return "odd";
}

MoePlacement parse_moe_placement(const std::string& s) {
  if (s == "odd") return MoePlacement::odd;
  if (s == "even") return MoePlacement::even;
  if (s == "all") return MoePlacement::all;
  if (s == "none") return MoePlacement::none;
  throw ConfigError("unknown moe_placement '" + s + "' (expected odd, even, all or none)");
}

bool ModelConfig::is_moe_block(int index) const {
  switch (moe_placement) {
    case MoePlacement::odd: return index % 2 == 1;
    case MoePlacement::even: return index % 2 == 0;
    case MoePlacement::all: return true;
    case MoePlacement::none: return false;
  }
  return false;
}

bool ModelConfig::has_moe() const {
  for (int i = 0; i < layers; ++i)
    if (is_moe_block(i)) return true;
  return false;
}

std::vector<std::string> ModelConfig::validate(const std::string& prefix) const {
  std::vector<std::string> errs;
  auto positive = [&](const char* field, int v) {
    if (v <= 0) errs.push_back(prefix + "." + field + " must be positive (got " + std::to_string(v) + ")");
  };
  positive("layers", layers);
  positive("d_model", d_model);
  positive("d_hidden", d_hidden);
  positive("n_heads", n_heads);
  positive("d_head", d_head);
  positive("vocab_size", vocab_size);
  positive("max_seq_len", max_seq_len);
  if (n_heads > 0 && d_head > 0 && n_heads * d_head != d_model) {
    errs.push_back(prefix + ": n_heads × d_head (" + std::to_string(n_heads * d_head) + ") must equal d_model (" +
                   std::to_string(d_model) + ")");
  }
  if (has_moe() && experts < 2) {
    errs.push_back(prefix + ".experts must be at least 2 for top-2 routing (got " + std::to_string(experts) + ")");
  }
  if (!(aux_coef >= 0.0) || !std::isfinite(aux_coef)) errs.push_back(prefix + ".aux_coef must be a finite value >= 0");
  if (!(init_std > 0.0) || !std::isfinite(init_std)) errs.push_back(prefix + ".init_std must be positive");
  return errs;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"layers", c.layers},           {"d_model", c.d_model},
                             {"d_hidden", c.d_hidden},       {"n_heads", c.n_heads},
                             {"d_head", c.d_head},           {"vocab_size", c.vocab_size},
                             {"max_seq_len", c.max_seq_len}, {"experts", c.experts},
                             {"moe_placement", to_string(c.moe_placement)},
                             {"aux_coef", c.aux_coef},       {"init_std", c.init_std}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.layers = j.value("layers", d.layers);
  c.d_model = j.value("d_model", d.d_model);
  c.d_hidden = j.value("d_hidden", d.d_hidden);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_head = j.value("d_head", d.d_head);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.experts = j.value("experts", d.experts);
  c.moe_placement = parse_moe_placement(j.value("moe_placement", to_string(d.moe_placement)));
  c.aux_coef = j.value("aux_coef", d.aux_coef);
  c.init_std = j.value("init_std", d.init_std);
}

}  // namespace lmoe
