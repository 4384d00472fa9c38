// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmoe/model/transformer.hpp"

#include <random>

#include "lmoe/numerics/ops.hpp"

namespace lmoe {

namespace {

template <typename T>
Tensor<T> normal_tensor(Shape shape, double std, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std);
  for (auto& v : t.values) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> filled(std::size_t n, T v) {
  return Tensor<T>(Shape{n}, std::vector<T>(n, v));
}

}  // namespace

bool is_expert_param(const std::string& name) { return name.find(".moe.experts.") != std::string::npos; }
bool is_gate_param(const std::string& name) { return name.find(".moe.gate.") != std::string::npos; }

template <typename T>
TransformerLM<T>::TransformerLM(const ModelConfig& config, std::uint64_t seed, std::size_t experts)
    : config_(config) {
  auto errs = config.validate();
  if (!errs.empty()) throw ConfigError(errs.front());
  std::mt19937_64 rng(seed);
  const auto m = static_cast<std::size_t>(config.d_model);
  const auto h = static_cast<std::size_t>(config.d_hidden);
  const double sd = config.init_std;
  const std::size_t e_count = experts == 0 ? static_cast<std::size_t>(config.experts) : experts;
  tok_emb_ = Parameter<T>("tok_emb", normal_tensor<T>({static_cast<std::size_t>(config.vocab_size), m}, sd, rng));
  pos_emb_ = Parameter<T>("pos_emb", normal_tensor<T>({static_cast<std::size_t>(config.max_seq_len), m}, sd, rng));
  for (int i = 0; i < config.layers; ++i) {
    const std::string p = "blocks." + std::to_string(i);
    TransformerBlock<T> b;
    b.ln1_gamma = Parameter<T>(p + ".ln1.gamma", filled<T>(m, T(1)));
    b.ln1_beta = Parameter<T>(p + ".ln1.beta", filled<T>(m, T(0)));
    b.wq = Parameter<T>(p + ".attn.wq", normal_tensor<T>({m, m}, sd, rng));
    b.wk = Parameter<T>(p + ".attn.wk", normal_tensor<T>({m, m}, sd, rng));
    b.wv = Parameter<T>(p + ".attn.wv", normal_tensor<T>({m, m}, sd, rng));
    b.wo = Parameter<T>(p + ".attn.wo", normal_tensor<T>({m, m}, sd, rng));
    b.ln2_gamma = Parameter<T>(p + ".ln2.gamma", filled<T>(m, T(1)));
    b.ln2_beta = Parameter<T>(p + ".ln2.beta", filled<T>(m, T(0)));
    if (config.is_moe_block(i)) {
      b.moe.emplace(p + ".moe", m, h, e_count, sd, rng);
    } else {
      b.ffn = FeedForward<T>::init(p + ".ffn", m, h, sd, rng, 0);
    }
    blocks_.push_back(std::move(b));
  }
  lnf_gamma_ = Parameter<T>("ln_f.gamma", filled<T>(m, T(1)));
  lnf_beta_ = Parameter<T>("ln_f.beta", filled<T>(m, T(0)));
}

template <typename T>
std::size_t TransformerLM<T>::num_experts() const {
  for (const auto& b : blocks_)
    if (b.moe) return b.moe->size();
  return 0;
}

template <typename T>
ForwardResult<T> TransformerLM<T>::forward(std::span<const int> tokens, std::size_t batch, std::size_t seq,
                                           const ForwardOptions& options) const {
  if (tokens.size() != batch * seq) {
    throw ShapeError("lm_forward: " + std::to_string(tokens.size()) + " tokens for batch " + std::to_string(batch) +
                     " × seq " + std::to_string(seq));
  }
  if (seq == 0 || seq > static_cast<std::size_t>(config_.max_seq_len)) {
    throw ShapeError("lm_forward: sequence length " + std::to_string(seq) + " outside [1, " +
                     std::to_string(config_.max_seq_len) + "]");
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= config_.vocab_size) {
      throw ShapeError("lm_forward: token " + std::to_string(tokens[i]) + " at position " + std::to_string(i % seq) +
                       " of row " + std::to_string(i / seq) + " is outside the vocabulary of " +
                       std::to_string(config_.vocab_size));
    }
  }
  std::vector<int> positions(batch * seq);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % seq);

  ForwardResult<T> result;
  auto x = ops::add(ops::embedding(tok_emb_.var, tokens), ops::embedding(pos_emb_.var, std::span<const int>(positions)));
  const auto heads = static_cast<std::size_t>(config_.n_heads);
  std::vector<Var<T>> aux_terms;
  if (options.record) options.record->layers.clear();
  std::size_t moe_index = 0;
  for (const auto& b : blocks_) {
    auto h = ops::layer_norm(x, b.ln1_gamma.var, b.ln1_beta.var);
    auto q = ops::matmul(h, b.wq.var);
    auto k = ops::matmul(h, b.wk.var);
    auto v = ops::matmul(h, b.wv.var);
    auto a = ops::causal_attention(q, k, v, batch, seq, heads);
    x = ops::add(x, ops::matmul(a, b.wo.var));
    auto h2 = ops::layer_norm(x, b.ln2_gamma.var, b.ln2_beta.var);
    if (b.moe) {
      const LayerRoute* replay = nullptr;
      if (options.replay) {
        if (moe_index >= options.replay->layers.size()) throw ShapeError("lm_forward: routing trace has too few layers");
        replay = &options.replay->layers[moe_index];
      }
      auto mo = b.moe->forward(h2, options.expert_limit, replay);
      aux_terms.push_back(load_balance_aux(mo.probs, std::span<const std::size_t>(mo.route.first)));
      result.expert_load.push_back(std::move(mo.load));
      if (options.record) options.record->layers.push_back(std::move(mo.route));
      x = ops::add(x, mo.output);
      ++moe_index;
    } else {
      x = ops::add(x, b.ffn->forward(h2));
    }
  }
  auto hf = ops::layer_norm(x, lnf_gamma_.var, lnf_beta_.var);
  result.logits = ops::matmul_nt(hf, tok_emb_.var);
  if (!aux_terms.empty()) {
    auto total = aux_terms[0];
    for (std::size_t i = 1; i < aux_terms.size(); ++i) total = ops::add(total, aux_terms[i]);
    result.aux = ops::scale(total, T(1) / T(aux_terms.size()));
  }
  return result;
}

template <typename T>
Var<T> TransformerLM<T>::lm_forward(std::span<const int> tokens) const {
  return forward(tokens, 1, tokens.size()).logits;
}

template <typename T>
std::vector<Parameter<T>*> TransformerLM<T>::parameters() {
  std::vector<Parameter<T>*> ps{&tok_emb_, &pos_emb_};
  for (auto& b : blocks_) {
    for (auto* p : {&b.ln1_gamma, &b.ln1_beta, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_gamma, &b.ln2_beta}) ps.push_back(p);
    if (b.ffn)
      for (auto* p : b.ffn->parameters()) ps.push_back(p);
    if (b.moe)
      for (auto* p : b.moe->parameters()) ps.push_back(p);
  }
  ps.push_back(&lnf_gamma_);
  ps.push_back(&lnf_beta_);
  return ps;
}

template <typename T>
std::vector<const Parameter<T>*> TransformerLM<T>::parameters() const {
  auto mut = const_cast<TransformerLM*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

template <typename T>
Parameter<T>* TransformerLM<T>::find(const std::string& name) {
  for (auto* p : parameters())
    if (p->name == name) return p;
  return nullptr;
}

template <typename T>
const Parameter<T>* TransformerLM<T>::find(const std::string& name) const {
  return const_cast<TransformerLM*>(this)->find(name);
}

template <typename T>
std::vector<MoELayer<T>*> TransformerLM<T>::moe_layers() {
  std::vector<MoELayer<T>*> out;
  for (auto& b : blocks_)
    if (b.moe) out.push_back(&*b.moe);
  return out;
}

template <typename T>
std::vector<const MoELayer<T>*> TransformerLM<T>::moe_layers() const {
  std::vector<const MoELayer<T>*> out;
  for (const auto& b : blocks_)
    if (b.moe) out.push_back(&*b.moe);
  return out;
}

template <typename T>
TransformerLM<T> TransformerLM<T>::clone() const {
  TransformerLM c;
  c.config_ = config_;
  c.tok_emb_ = clone_parameter(tok_emb_);
  c.pos_emb_ = clone_parameter(pos_emb_);
  for (const auto& b : blocks_) {
    TransformerBlock<T> nb;
    nb.ln1_gamma = clone_parameter(b.ln1_gamma);
    nb.ln1_beta = clone_parameter(b.ln1_beta);
    nb.wq = clone_parameter(b.wq);
    nb.wk = clone_parameter(b.wk);
    nb.wv = clone_parameter(b.wv);
    nb.wo = clone_parameter(b.wo);
    nb.ln2_gamma = clone_parameter(b.ln2_gamma);
    nb.ln2_beta = clone_parameter(b.ln2_beta);
    if (b.ffn) {
      nb.ffn = FeedForward<T>{clone_parameter(b.ffn->w1), clone_parameter(b.ffn->b1), clone_parameter(b.ffn->w2),
                              clone_parameter(b.ffn->b2)};
    }
    if (b.moe) nb.moe = b.moe->clone();
    c.blocks_.push_back(std::move(nb));
  }
  c.lnf_gamma_ = clone_parameter(lnf_gamma_);
  c.lnf_beta_ = clone_parameter(lnf_beta_);
  return c;
}

template <typename T>
ActivatedParams count_activated_params(const TransformerLM<T>& model) {
  const auto& c = model.config();
  const auto m = static_cast<std::size_t>(c.d_model), h = static_cast<std::size_t>(c.d_hidden);
  ActivatedParams a;
  a.per_token_expert_activated = 2 * (2 * m * h + h + m);
  for (const auto* p : model.parameters()) {
    const auto& n = p->name;
    const auto sz = p->size();
    a.total += sz;
    if (is_gate_param(n)) {
      a.gating += sz;
    } else if (n.find(".ffn.") != std::string::npos) {
      a.dense += sz;
    } else if (n.find(".attn.") != std::string::npos) {
      a.attention += sz;
    } else if (n == "tok_emb" || n == "pos_emb") {
      a.embedding += sz;
    } else if (!is_expert_param(n)) {
      a.norm += sz;
    }
  }
  a.moe_layers = model.moe_layers().size();
  return a;
}

template class TransformerLM<float>;
template class TransformerLM<double>;
template ActivatedParams count_activated_params<float>(const TransformerLM<float>&);
template ActivatedParams count_activated_params<double>(const TransformerLM<double>&);

}  // namespace lmoe
