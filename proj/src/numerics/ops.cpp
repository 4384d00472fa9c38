// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmoe/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "lmoe/numerics/gemm.hpp"

namespace lmoe::ops {

namespace {

// Message is only built on failure.
#define LMOE_REQUIRE(ok, ...)                        \
  do {                                               \
    if (!(ok)) throw ShapeError(__VA_ARGS__);        \
  } while (0)

std::string two_shapes(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b);
}

// Grad slot of input i, or nullptr when that input takes no gradient.
template <typename T>
T* input_grad(Node<T>& n, std::size_t i) {
  auto& t = n.inputs[i]->tensor;
  return t.requires_grad ? t.grad_slot().data() : nullptr;
}

template <typename T>
const std::vector<T>& input_values(const Node<T>& n, std::size_t i) {
  return n.inputs[i]->tensor.values;
}

bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.rbegin(), tail.rend(), full.rbegin());
}

template <typename T>
void check_matrix(const char* op, const Var<T>& x) {
  LMOE_REQUIRE(x.shape().size() == 2, std::string(op) + ": expected a matrix, got " + shape_str(x.shape()));
}

}  // namespace

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  check_matrix("matmul", a);
  check_matrix("matmul", b);
  LMOE_REQUIRE(a.shape()[1] == b.shape()[0], two_shapes("matmul", a.shape(), b.shape()));
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  Tensor<T> out(Shape{n, m});
  kernels::gemm<T>(false, false, n, m, k, a.values().data(), k, b.values().data(), m,
                   out.values.data(), m, false);
  return make_op<T>("matmul", std::move(out), {a, b}, [n, k, m](Node<T>& node) {
    const T* g = node.tensor.grad.data();
    if (T* ga = input_grad(node, 0)) {
      kernels::gemm<T>(false, true, n, k, m, g, m, input_values(node, 1).data(), m, ga, k, true);
    }
    if (T* gb = input_grad(node, 1)) {
      kernels::gemm<T>(true, false, k, m, n, input_values(node, 0).data(), k, g, m, gb, m, true);
    }
  });
}

template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  check_matrix("matmul_nt", a);
  check_matrix("matmul_nt", b);
  LMOE_REQUIRE(a.shape()[1] == b.shape()[1], two_shapes("matmul_nt", a.shape(), b.shape()));
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[0];
  Tensor<T> out(Shape{n, m});
  kernels::gemm<T>(false, true, n, m, k, a.values().data(), k, b.values().data(), k,
                   out.values.data(), m, false);
  return make_op<T>("matmul_nt", std::move(out), {a, b}, [n, k, m](Node<T>& node) {
    const T* g = node.tensor.grad.data();
    if (T* ga = input_grad(node, 0)) {
      // dA[n×k] += G[n×m] · B[m×k]
      kernels::gemm<T>(false, false, n, k, m, g, m, input_values(node, 1).data(), k, ga, k, true);
    }
    if (T* gb = input_grad(node, 1)) {
      // dB[m×k] += Gᵀ[m×n] · A[n×k]
      kernels::gemm<T>(true, false, m, k, n, g, m, input_values(node, 0).data(), k, gb, k, true);
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  LMOE_REQUIRE(is_suffix(a.shape(), b.shape()), two_shapes("add", a.shape(), b.shape()));
  const std::size_t bs = b.size();
  Tensor<T> out(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) out.values[i] = av[i] + bv[i % bs];
  return make_op<T>("add", std::move(out), {a, b}, [bs](Node<T>& node) {
    const auto& g = node.tensor.grad;
    if (T* ga = input_grad(node, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (T* gb = input_grad(node, 1)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % bs] += g[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  LMOE_REQUIRE(is_suffix(a.shape(), b.shape()), two_shapes("mul", a.shape(), b.shape()));
  const std::size_t bs = b.size();
  Tensor<T> out(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) out.values[i] = av[i] * bv[i % bs];
  return make_op<T>("mul", std::move(out), {a, b}, [bs](Node<T>& node) {
    const auto& g = node.tensor.grad;
    const auto& av = input_values(node, 0);
    const auto& bv = input_values(node, 1);
    if (T* ga = input_grad(node, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i % bs];
    }
    if (T* gb = input_grad(node, 1)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % bs] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out(a.shape());
  const auto& av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i) out.values[i] = av[i] * factor;
  return make_op<T>("scale", std::move(out), {a}, [factor](Node<T>& node) {
    const auto& g = node.tensor.grad;
    T* ga = input_grad(node, 0);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
  const T c = T(kGeluC), k = T(kGeluA);
  Tensor<T> out(a.shape());
  const auto& av = a.values();
  auto th = std::make_shared<std::vector<T>>(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T x = av[i];
    (*th)[i] = std::tanh(c * (x + k * x * x * x));
    out.values[i] = T(0.5) * x * (T(1) + (*th)[i]);
  }
  return make_op<T>("gelu", std::move(out), {a}, [c, k, th](Node<T>& node) {
    const auto& g = node.tensor.grad;
    const auto& av = input_values(node, 0);
    T* ga = input_grad(node, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = av[i];
      const T t = (*th)[i];
      const T d = T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * k * x * x);
      ga[i] += g[i] * d;
    }
  });
}

namespace {

template <typename T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    T* yr = y + r * cols;
    T mx = xr[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    T s = T(0);
    for (std::size_t j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    const T inv = T(1) / s;
    for (std::size_t j = 0; j < cols; ++j) yr[j] *= inv;
  }
}

// log softmax of one row; returns nothing, writes out.
template <typename T>
void log_softmax_row(const T* x, T* out, std::size_t cols) {
  T mx = x[0];
  for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
  T s = T(0);
  for (std::size_t j = 0; j < cols; ++j) s += std::exp(x[j] - mx);
  const T lse = mx + std::log(s);
  for (std::size_t j = 0; j < cols; ++j) out[j] = x[j] - lse;
}

}  // namespace

template <typename T>
Var<T> softmax(const Var<T>& a) {
  LMOE_REQUIRE(!a.shape().empty() && a.shape().back() > 0, "softmax: invalid axis for shape " + shape_str(a.shape()));
  const std::size_t cols = a.shape().back(), rows = a.size() / cols;
  Tensor<T> out(a.shape());
  softmax_rows(a.values().data(), out.values.data(), rows, cols);
  return make_op<T>("softmax", std::move(out), {a}, [rows, cols](Node<T>& node) {
    const auto& g = node.tensor.grad;
    const auto& y = node.tensor.values;
    T* ga = input_grad(node, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = T(0);
      for (std::size_t j = 0; j < cols; ++j) dot += g[r * cols + j] * y[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j) ga[r * cols + j] += y[r * cols + j] * (g[r * cols + j] - dot);
    }
  });
}

template <typename T>
Var<T> log_softmax(const Var<T>& a) {
  LMOE_REQUIRE(!a.shape().empty() && a.shape().back() > 0, "log_softmax: invalid axis for shape " + shape_str(a.shape()));
  const std::size_t cols = a.shape().back(), rows = a.size() / cols;
  Tensor<T> out(a.shape());
  for (std::size_t r = 0; r < rows; ++r) log_softmax_row(a.values().data() + r * cols, out.values.data() + r * cols, cols);
  return make_op<T>("log_softmax", std::move(out), {a}, [rows, cols](Node<T>& node) {
    const auto& g = node.tensor.grad;
    const auto& y = node.tensor.values;
    T* ga = input_grad(node, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      T gs = T(0);
      for (std::size_t j = 0; j < cols; ++j) gs += g[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j) ga[r * cols + j] += g[r * cols + j] - std::exp(y[r * cols + j]) * gs;
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  LMOE_REQUIRE(!x.shape().empty(), "layer_norm: scalar input");
  const std::size_t cols = x.shape().back(), rows = x.size() / cols;
  LMOE_REQUIRE(gamma.shape() == Shape{cols} && beta.shape() == Shape{cols},
          "layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
              " do not match last axis of " + shape_str(x.shape()));
  Tensor<T> out(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * cols;
    T mu = T(0);
    for (std::size_t j = 0; j < cols; ++j) mu += xr[j];
    mu /= T(cols);
    T var = T(0);
    for (std::size_t j = 0; j < cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= T(cols);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < cols; ++j) {
      const T h = (xr[j] - mu) * rs;
      (*xhat)[r * cols + j] = h;
      out.values[r * cols + j] = h * gv[j] + bv[j];
    }
  }
  return make_op<T>("layer_norm", std::move(out), {x, gamma, beta}, [rows, cols, xhat, rstd](Node<T>& node) {
    const auto& g = node.tensor.grad;
    const auto& gv = input_values(node, 1);
    T* gx = input_grad(node, 0);
    T* gg = input_grad(node, 1);
    T* gb = input_grad(node, 2);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gr = g.data() + r * cols;
      const T* hr = xhat->data() + r * cols;
      if (gg) for (std::size_t j = 0; j < cols; ++j) gg[j] += gr[j] * hr[j];
      if (gb) for (std::size_t j = 0; j < cols; ++j) gb[j] += gr[j];
      if (gx) {
        T m1 = T(0), m2 = T(0);
        for (std::size_t j = 0; j < cols; ++j) {
          const T dh = gr[j] * gv[j];
          m1 += dh;
          m2 += dh * hr[j];
        }
        m1 /= T(cols);
        m2 /= T(cols);
        const T rs = (*rstd)[r];
        for (std::size_t j = 0; j < cols; ++j) {
          gx[r * cols + j] += rs * (gr[j] * gv[j] - m1 - hr[j] * m2);
        }
      }
    }
  });
}

template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const std::size_t> rows) {
  check_matrix("gather_rows", x);
  const std::size_t n = x.shape()[0], cols = x.shape()[1];
  Tensor<T> out(Shape{rows.size(), cols});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    LMOE_REQUIRE(rows[r] < n, "gather_rows: row " + std::to_string(rows[r]) + " out of range for " + shape_str(x.shape()));
    std::copy_n(x.values().data() + rows[r] * cols, cols, out.values.data() + r * cols);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_op<T>("gather_rows", std::move(out), {x}, [idx = std::move(idx), cols](Node<T>& node) {
    const auto& g = node.tensor.grad;
    T* gx = input_grad(node, 0);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < cols; ++j) gx[idx[r] * cols + j] += g[r * cols + j];
  });
}

template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const int> ids) {
  check_matrix("embedding", table);
  const std::size_t vocab = table.shape()[0];
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t p = 0; p < ids.size(); ++p) {
    if (ids[p] < 0 || static_cast<std::size_t>(ids[p]) >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(ids[p]) + " at position " + std::to_string(p) +
                       " out of range [0, " + std::to_string(vocab) + ")");
    }
    rows[p] = static_cast<std::size_t>(ids[p]);
  }
  return gather_rows(table, std::span<const std::size_t>(rows));
}

// Row chunk for the causal gemms; columns past the chunk's last row are skipped.
constexpr std::size_t kAttnChunk = 32;

template <typename T>
Var<T> causal_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t batch,
                        std::size_t seq, std::size_t heads) {
  check_matrix("causal_attention", q);
  LMOE_REQUIRE(q.shape() == k.shape() && q.shape() == v.shape(),
          "causal_attention: q/k/v shapes differ: " + shape_str(q.shape()) + ", " + shape_str(k.shape()) +
              ", " + shape_str(v.shape()));
  const std::size_t width = q.shape()[1];
  LMOE_REQUIRE(q.shape()[0] == batch * seq, "causal_attention: " + shape_str(q.shape()) + " is not batch·seq = " +
                                           std::to_string(batch * seq) + " rows");
  LMOE_REQUIRE(heads > 0 && width % heads == 0, "causal_attention: width " + std::to_string(width) +
                                               " not divisible by " + std::to_string(heads) + " heads");
  const std::size_t dh = width / heads;
  const T sc = T(1) / std::sqrt(T(dh));
  const std::size_t ss = seq * seq;
  auto probs = std::make_shared<std::vector<T>>(batch * heads * ss, T(0));
  Tensor<T> out(q.shape());
  std::vector<T> scores(ss);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = b * seq * width + h * dh;
      for (std::size_t r0 = 0; r0 < seq; r0 += kAttnChunk) {
        const std::size_t r1 = std::min(seq, r0 + kAttnChunk);
        kernels::gemm<T>(false, true, r1 - r0, r1, dh, q.values().data() + off + r0 * width, width,
                         k.values().data() + off, width, scores.data() + r0 * seq, seq, false);
      }
      T* p = probs->data() + (b * heads + h) * ss;
      for (std::size_t i = 0; i < seq; ++i) {
        T* sr = scores.data() + i * seq;
        T mx = sr[0] * sc;
        for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, sr[j] * sc);
        T s = T(0);
        for (std::size_t j = 0; j <= i; ++j) {
          p[i * seq + j] = std::exp(sr[j] * sc - mx);
          s += p[i * seq + j];
        }
        const T inv = T(1) / s;
        for (std::size_t j = 0; j <= i; ++j) p[i * seq + j] *= inv;
      }
      for (std::size_t r0 = 0; r0 < seq; r0 += kAttnChunk) {
        const std::size_t r1 = std::min(seq, r0 + kAttnChunk);
        kernels::gemm<T>(false, false, r1 - r0, dh, r1, p + r0 * seq, seq, v.values().data() + off, width,
                         out.values.data() + off + r0 * width, width, false);
      }
    }
  }
  return make_op<T>("causal_attention", std::move(out), {q, k, v},
                    [batch, seq, heads, dh, width, sc, ss, probs](Node<T>& node) {
    const T* g = node.tensor.grad.data();
    const auto& qv = input_values(node, 0);
    const auto& kv = input_values(node, 1);
    const auto& vv = input_values(node, 2);
    T* gq = input_grad(node, 0);
    T* gk = input_grad(node, 1);
    T* gv = input_grad(node, 2);
    std::vector<T> dp(ss);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = b * seq * width + h * dh;
        const T* p = probs->data() + (b * heads + h) * ss;
        // rows j of P^T only see i >= j
        if (gv) {
          for (std::size_t r0 = 0; r0 < seq; r0 += kAttnChunk) {
            const std::size_t r1 = std::min(seq, r0 + kAttnChunk);
            kernels::gemm<T>(true, false, r1 - r0, dh, seq - r0, p + r0 * seq + r0, seq, g + off + r0 * width, width,
                             gv + off + r0 * width, width, true);
          }
        }
        if (!gq && !gk) continue;
        for (std::size_t r0 = 0; r0 < seq; r0 += kAttnChunk) {
          const std::size_t r1 = std::min(seq, r0 + kAttnChunk);
          kernels::gemm<T>(false, true, r1 - r0, r1, dh, g + off + r0 * width, width, vv.data() + off, width,
                           dp.data() + r0 * seq, seq, false);
        }
        for (std::size_t i = 0; i < seq; ++i) {
          T* dr = dp.data() + i * seq;
          const T* pr = p + i * seq;
          T dot = T(0);
          for (std::size_t j = 0; j <= i; ++j) dot += pr[j] * dr[j];
          for (std::size_t j = 0; j <= i; ++j) dr[j] = pr[j] * (dr[j] - dot) * sc;
          for (std::size_t j = i + 1; j < seq; ++j) dr[j] = T(0);
        }
        for (std::size_t r0 = 0; r0 < seq; r0 += kAttnChunk) {
          const std::size_t r1 = std::min(seq, r0 + kAttnChunk);
          if (gq) {
            kernels::gemm<T>(false, false, r1 - r0, dh, r1, dp.data() + r0 * seq, seq, kv.data() + off, width,
                             gq + off + r0 * width, width, true);
          }
          if (gk) {
            kernels::gemm<T>(true, false, r1 - r0, dh, seq - r0, dp.data() + r0 * seq + r0, seq,
                             qv.data() + off + r0 * width, width, gk + off + r0 * width, width, true);
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> targets) {
  check_matrix("cross_entropy", logits);
  const std::size_t rows = logits.shape()[0], cols = logits.shape()[1];
  LMOE_REQUIRE(targets.size() == rows, "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                      shape_str(logits.shape()) + " logits");
  LMOE_REQUIRE(rows > 0, "cross_entropy: empty batch");
  auto probs = std::make_shared<std::vector<T>>(rows * cols);
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<T> lp(cols);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= cols) {
      throw ShapeError("cross_entropy: target " + std::to_string(tgt[r]) + " at row " + std::to_string(r) +
                       " out of range [0, " + std::to_string(cols) + ")");
    }
    log_softmax_row(logits.values().data() + r * cols, lp.data(), cols);
    for (std::size_t j = 0; j < cols; ++j) (*probs)[r * cols + j] = std::exp(lp[j]);
    total -= static_cast<double>(lp[static_cast<std::size_t>(tgt[r])]);
  }
  auto out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(rows)));
  return make_op<T>("cross_entropy", std::move(out), {logits}, [rows, cols, probs, tgt = std::move(tgt)](Node<T>& node) {
    const T g = node.tensor.grad[0] / T(rows);
    T* gl = input_grad(node, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < cols; ++j) gl[r * cols + j] += g * (*probs)[r * cols + j];
      gl[r * cols + static_cast<std::size_t>(tgt[r])] -= g;
    }
  });
}

template <typename T>
Var<T> soft_cross_entropy(const Var<T>& logits, const Tensor<T>& target_probs) {
  check_matrix("soft_cross_entropy", logits);
  LMOE_REQUIRE(target_probs.shape == logits.shape(), two_shapes("soft_cross_entropy", logits.shape(), target_probs.shape));
  const std::size_t rows = logits.shape()[0], cols = logits.shape()[1];
  LMOE_REQUIRE(rows > 0, "soft_cross_entropy: empty batch");
  auto probs = std::make_shared<std::vector<T>>(rows * cols);
  auto target = std::make_shared<std::vector<T>>(target_probs.values);
  std::vector<T> lp(cols);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    log_softmax_row(logits.values().data() + r * cols, lp.data(), cols);
    T row = T(0);
    for (std::size_t j = 0; j < cols; ++j) {
      (*probs)[r * cols + j] = std::exp(lp[j]);
      row -= (*target)[r * cols + j] * lp[j];
    }
    total += static_cast<double>(row);
  }
  auto out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(rows)));
  return make_op<T>("soft_cross_entropy", std::move(out), {logits}, [rows, cols, probs, target](Node<T>& node) {
    const T g = node.tensor.grad[0] / T(rows);
    T* gl = input_grad(node, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      T mass = T(0);
      for (std::size_t j = 0; j < cols; ++j) mass += (*target)[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j) {
        gl[r * cols + j] += g * ((*probs)[r * cols + j] * mass - (*target)[r * cols + j]);
      }
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  double s = 0.0;
  for (T x : a.values()) s += static_cast<double>(x);
  return make_op<T>("sum", Tensor<T>::scalar(static_cast<T>(s)), {a}, [](Node<T>& node) {
    const T g = node.tensor.grad[0];
    T* ga = input_grad(node, 0);
    const std::size_t n = node.inputs[0]->tensor.values.size();
    for (std::size_t i = 0; i < n; ++i) ga[i] += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  LMOE_REQUIRE(a.size() > 0, "mean: empty tensor");
  double s = 0.0;
  for (T x : a.values()) s += static_cast<double>(x);
  const std::size_t n = a.size();
  return make_op<T>("mean", Tensor<T>::scalar(static_cast<T>(s / static_cast<double>(n))), {a}, [n](Node<T>& node) {
    const T g = node.tensor.grad[0] / T(n);
    T* ga = input_grad(node, 0);
    for (std::size_t i = 0; i < n; ++i) ga[i] += g;
  });
}

template <typename T>
Var<T> mean_rows(const Var<T>& a) {
  check_matrix("mean_rows", a);
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  LMOE_REQUIRE(rows > 0, "mean_rows: no rows");
  Tensor<T> out(Shape{cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols; ++j) out.values[j] += a.values()[r * cols + j];
  for (auto& x : out.values) x /= T(rows);
  return make_op<T>("mean_rows", std::move(out), {a}, [rows, cols](Node<T>& node) {
    const auto& g = node.tensor.grad;
    T* ga = input_grad(node, 0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < cols; ++j) ga[r * cols + j] += g[j] / T(rows);
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  LMOE_REQUIRE(!parts.empty(), "concat_rows: no inputs");
  const std::size_t cols = parts[0].shape().empty() ? 1 : parts[0].shape().back();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    LMOE_REQUIRE((s.size() == 1 || s.size() == 2) && s.back() == cols,
            two_shapes("concat_rows", parts[0].shape(), s));
    offsets.push_back(total);
    total += p.size() / cols;
  }
  Tensor<T> out(Shape{total, cols});
  for (std::size_t i = 0; i < parts.size(); ++i)
    std::copy(parts[i].values().begin(), parts[i].values().end(), out.values.begin() + offsets[i] * cols);
  return make_op<T>("concat_rows", std::move(out), parts, [offsets, cols](Node<T>& node) {
    const auto& g = node.tensor.grad;
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      if (T* gi = input_grad(node, i)) {
        const std::size_t n = node.inputs[i]->tensor.values.size();
        for (std::size_t j = 0; j < n; ++j) gi[j] += g[offsets[i] * cols + j];
      }
    }
  });
}

template <typename T>
Var<T> slice_rows(const Var<T>& a, std::size_t begin, std::size_t end) {
  check_matrix("slice_rows", a);
  const std::size_t cols = a.shape()[1];
  LMOE_REQUIRE(begin <= end && end <= a.shape()[0], "slice_rows: range [" + std::to_string(begin) + ", " +
                                                   std::to_string(end) + ") invalid for " + shape_str(a.shape()));
  Tensor<T> out(Shape{end - begin, cols});
  std::copy(a.values().begin() + begin * cols, a.values().begin() + end * cols, out.values.begin());
  return make_op<T>("slice_rows", std::move(out), {a}, [begin, cols](Node<T>& node) {
    const auto& g = node.tensor.grad;
    T* ga = input_grad(node, 0) + begin * cols;
    for (std::size_t j = 0; j < g.size(); ++j) ga[j] += g[j];
  });
}

template <typename T>
Var<T> squared_distance(const Var<T>& a, const Tensor<T>& reference) {
  LMOE_REQUIRE(a.shape() == reference.shape, two_shapes("squared_distance", a.shape(), reference.shape));
  auto ref = std::make_shared<std::vector<T>>(reference.values);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T d = a.values()[i] - (*ref)[i];
    s += static_cast<double>(d * d);
  }
  return make_op<T>("squared_distance", Tensor<T>::scalar(static_cast<T>(s)), {a}, [ref](Node<T>& node) {
    const T g = node.tensor.grad[0];
    const auto& av = input_values(node, 0);
    T* ga = input_grad(node, 0);
    for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g * T(2) * (av[i] - (*ref)[i]);
  });
}

template <typename T>
Var<T> top2_weights(const Var<T>& probs, std::span<const std::size_t> first, std::span<const std::size_t> second) {
  check_matrix("top2_weights", probs);
  const std::size_t n = probs.shape()[0], e = probs.shape()[1];
  LMOE_REQUIRE(first.size() == n && second.size() == n, "top2_weights: index count does not match " + shape_str(probs.shape()));
  std::vector<std::size_t> i1(first.begin(), first.end()), i2(second.begin(), second.end());
  Tensor<T> out(Shape{n, 2});
  const auto& p = probs.values();
  for (std::size_t t = 0; t < n; ++t) {
    LMOE_REQUIRE(i1[t] < e && i2[t] < e && i1[t] != i2[t], "top2_weights: invalid expert pair at token " + std::to_string(t));
    const T w1 = p[t * e + i1[t]] / (p[t * e + i1[t]] + p[t * e + i2[t]]);
    out.values[2 * t] = w1;
    out.values[2 * t + 1] = T(1) - w1;
  }
  return make_op<T>("top2_weights", std::move(out), {probs}, [n, e, i1 = std::move(i1), i2 = std::move(i2)](Node<T>& node) {
    const auto& g = node.tensor.grad;
    const auto& p = input_values(node, 0);
    T* gp = input_grad(node, 0);
    for (std::size_t t = 0; t < n; ++t) {
      const T p1 = p[t * e + i1[t]], p2 = p[t * e + i2[t]];
      const T s = p1 + p2;
      const T dw = g[2 * t] - g[2 * t + 1];  // w2 = 1 − w1
      gp[t * e + i1[t]] += dw * p2 / (s * s);
      gp[t * e + i2[t]] -= dw * p1 / (s * s);
    }
  });
}

template <typename T>
Var<T> moe_combine(std::size_t tokens, std::size_t width, const Var<T>& weights,
                   const std::vector<ExpertOutput<T>>& parts) {
  LMOE_REQUIRE((weights.shape() == Shape{tokens, 2}), "moe_combine: weights " + shape_str(weights.shape()) +
                                                   " do not match " + std::to_string(tokens) + " tokens");
  std::vector<Var<T>> inputs{weights};
  auto routes = std::make_shared<std::vector<std::pair<std::vector<std::size_t>, std::vector<unsigned char>>>>();
  for (const auto& part : parts) {
    LMOE_REQUIRE((part.output.shape() == Shape{part.rows.size(), width} && part.slots.size() == part.rows.size()),
            "moe_combine: expert output " + shape_str(part.output.shape()) + " does not match its " +
                std::to_string(part.rows.size()) + " routed tokens");
    inputs.push_back(part.output);
    routes->emplace_back(part.rows, part.slots);
  }
  Tensor<T> out(Shape{tokens, width});
  const auto& w = weights.values();
  for (unsigned char slot = 0; slot < 2; ++slot) {
    for (std::size_t e = 0; e < parts.size(); ++e) {
      const auto& [rows, slots] = (*routes)[e];
      const auto& y = parts[e].output.values();
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (slots[r] != slot) continue;
        const T wt = w[2 * rows[r] + slot];
        T* o = out.values.data() + rows[r] * width;
        for (std::size_t j = 0; j < width; ++j) o[j] += wt * y[r * width + j];
      }
    }
  }
  return make_op<T>("moe_combine", std::move(out), std::move(inputs), [width, routes](Node<T>& node) {
    const auto& g = node.tensor.grad;
    const auto& w = input_values(node, 0);
    T* gw = input_grad(node, 0);
    for (std::size_t e = 0; e < routes->size(); ++e) {
      const auto& [rows, slots] = (*routes)[e];
      const auto& y = input_values(node, e + 1);
      T* gy = input_grad(node, e + 1);
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const T* gr = g.data() + rows[r] * width;
        const std::size_t wi = 2 * rows[r] + slots[r];
        if (gy) for (std::size_t j = 0; j < width; ++j) gy[r * width + j] += w[wi] * gr[j];
        if (gw) {
          T d = T(0);
          for (std::size_t j = 0; j < width; ++j) d += gr[j] * y[r * width + j];
          gw[wi] += d;
        }
      }
    }
  });
}

#define LMOE_INSTANTIATE(T)                                                                          \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                          \
  template Var<T> matmul_nt<T>(const Var<T>&, const Var<T>&);                                       \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                             \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                             \
  template Var<T> scale<T>(const Var<T>&, T);                                                       \
  template Var<T> gelu<T>(const Var<T>&);                                                           \
  template Var<T> softmax<T>(const Var<T>&);                                                        \
  template Var<T> log_softmax<T>(const Var<T>&);                                                    \
  template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);                    \
  template Var<T> embedding<T>(const Var<T>&, std::span<const int>);                                \
  template Var<T> gather_rows<T>(const Var<T>&, std::span<const std::size_t>);                      \
  template Var<T> causal_attention<T>(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t,    \
                                      std::size_t, std::size_t);                                    \
  template Var<T> cross_entropy<T>(const Var<T>&, std::span<const int>);                            \
  template Var<T> soft_cross_entropy<T>(const Var<T>&, const Tensor<T>&);                           \
  template Var<T> sum<T>(const Var<T>&);                                                            \
  template Var<T> mean<T>(const Var<T>&);                                                           \
  template Var<T> mean_rows<T>(const Var<T>&);                                                      \
  template Var<T> concat_rows<T>(const std::vector<Var<T>>&);                                       \
  template Var<T> slice_rows<T>(const Var<T>&, std::size_t, std::size_t);                           \
  template Var<T> squared_distance<T>(const Var<T>&, const Tensor<T>&);                             \
  template Var<T> top2_weights<T>(const Var<T>&, std::span<const std::size_t>,                      \
                                  std::span<const std::size_t>);                                    \
  template Var<T> moe_combine<T>(std::size_t, std::size_t, const Var<T>&,                           \
                                 const std::vector<ExpertOutput<T>>&);

LMOE_INSTANTIATE(float)
LMOE_INSTANTIATE(double)
#undef LMOE_INSTANTIATE

}  // namespace lmoe::ops
