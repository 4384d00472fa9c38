// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "lmoe/numerics/autograd.hpp"

// Differentiable primitives. Matrices are row-major; "rows" are all leading
// axes flattened and "cols" the last axis. Every reduction runs in a fixed
// left-to-right order, so identical inputs give bitwise-identical outputs.
namespace lmoe::ops {

// GELU tanh-approximation coefficients.
inline constexpr double kGeluC = 0.7978845608;
inline constexpr double kGeluA = 0.044715;

/// a[n×k] · b[k×m]
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

/// a[n×k] · b[m×k]ᵀ
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b);

/// Elementwise a + b. b may match a's shape or any trailing suffix of it
/// (broadcast over the leading axes of a).
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

/// Elementwise a · b with the same broadcasting rule as add.
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& a, T factor);

template <typename T>
Var<T> gelu(const Var<T>& a);

/// Softmax over the last axis, stabilised by subtracting the row maximum.
template <typename T>
Var<T> softmax(const Var<T>& a);

template <typename T>
Var<T> log_softmax(const Var<T>& a);

/// (x − mean) / sqrt(var + eps) · gamma + beta over the last axis.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

/// Rows of `table` selected by `ids`: [ids.size() × cols].
template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const int> ids);

/// Same as embedding for arbitrary matrices (used by MoE dispatch).
template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const std::size_t> rows);

/// Multi-head causal scaled dot-product attention over q, k, v of shape
/// [batch·seq × heads·d_head]; position i attends to positions 0..i of its
/// own sequence.
template <typename T>
Var<T> causal_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t batch,
                        std::size_t seq, std::size_t heads);

/// Mean over rows of −log softmax(logits)[row, target[row]].
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> targets);

/// Mean over rows of −Σ_v target[row,v] · log softmax(logits)[row,v].
/// `target_probs` is treated as constant.
template <typename T>
Var<T> soft_cross_entropy(const Var<T>& logits, const Tensor<T>& target_probs);

template <typename T>
Var<T> sum(const Var<T>& a);

template <typename T>
Var<T> mean(const Var<T>& a);

/// Column means: [rows × cols] → [cols].
template <typename T>
Var<T> mean_rows(const Var<T>& a);

/// Stacks inputs along the first axis. 1-D inputs count as single rows.
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts);

/// Rows [begin, end) of a matrix.
template <typename T>
Var<T> slice_rows(const Var<T>& a, std::size_t begin, std::size_t end);

/// Σ (a − reference)²; reference is constant.
template <typename T>
Var<T> squared_distance(const Var<T>& a, const Tensor<T>& reference);

/// Top-2 combine weights from gate probabilities [n × E]:
/// w1 = p[i1] / (p[i1] + p[i2]), w2 = 1 − w1. Returns [n × 2].
template <typename T>
Var<T> top2_weights(const Var<T>& probs, std::span<const std::size_t> first,
                    std::span<const std::size_t> second);

/// One expert's share of an MoE dispatch: its outputs for the tokens in
/// `rows`, each routed through combine slot `slots[r]` (0 or 1).
template <typename T>
struct ExpertOutput {
  Var<T> output;
  std::vector<std::size_t> rows;
  std::vector<unsigned char> slots;
};

/// out[t] = w[t,0]·y_first(t) + w[t,1]·y_second(t), evaluated slot 0 first.
template <typename T>
Var<T> moe_combine(std::size_t tokens, std::size_t width, const Var<T>& weights,
                   const std::vector<ExpertOutput<T>>& parts);

}  // namespace lmoe::ops
