// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmoe/numerics/gemm.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

namespace lmoe::kernels {

namespace {

// 64-byte SIMD lane group: 16 floats or 8 doubles.
typedef float vf32 __attribute__((vector_size(64)));
typedef double vf64 __attribute__((vector_size(64)));

template <typename T>
struct VecOf;
template <>
struct VecOf<float> {
  using type = vf32;
};
template <>
struct VecOf<double> {
  using type = vf64;
};

template <typename T>
using vec_t = typename VecOf<T>::type;

template <typename T>
constexpr std::size_t kLanes = 64 / sizeof(T);

template <typename T>
inline vec_t<T> load(const T* p) {
  vec_t<T> v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

template <typename T>
inline void store(T* p, vec_t<T> v) {
  std::memcpy(p, &v, sizeof(v));
}

// RB rows × NV lane groups of C; the k loop is innermost so every element
// accumulates in ascending k. A(r, kk) lives at a[r * ars + kk * aks], which
// covers both A and a transposed A without packing it.
template <typename T, int RB, int NV>
inline void block(std::size_t k, const T* a, std::size_t ars, std::size_t aks, const T* b, std::size_t ldb, T* c,
                  std::size_t ldc, bool accumulate) {
  constexpr std::size_t W = kLanes<T>;
  vec_t<T> acc[RB][NV];
  for (int r = 0; r < RB; ++r)
    for (int v = 0; v < NV; ++v) acc[r][v] = vec_t<T>{};
  for (std::size_t kk = 0; kk < k; ++kk) {
    const T* brow = b + kk * ldb;
    const T* acol = a + kk * aks;
    vec_t<T> bv[NV];
    for (int v = 0; v < NV; ++v) bv[v] = load(brow + v * W);
    for (int r = 0; r < RB; ++r) {
      const T av = acol[r * ars];
      for (int v = 0; v < NV; ++v) acc[r][v] += av * bv[v];
    }
  }
  for (int r = 0; r < RB; ++r) {
    T* crow = c + r * ldc;
    for (int v = 0; v < NV; ++v) {
      if (accumulate) {
        store(crow + v * W, load(crow + v * W) + acc[r][v]);
      } else {
        store(crow + v * W, acc[r][v]);
      }
    }
  }
}

// Columns that do not fill a lane group.
template <typename T>
void scalar_tail(std::size_t rows, std::size_t cols, std::size_t k, const T* a, std::size_t ars, std::size_t aks,
                 const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      T s = T(0);
      for (std::size_t kk = 0; kk < k; ++kk) s += a[i * ars + kk * aks] * b[kk * ldb + j];
      c[i * ldc + j] = accumulate ? c[i * ldc + j] + s : s;
    }
  }
}

template <typename T, int RB>
void row_panel(std::size_t m, std::size_t k, const T* a, std::size_t ars, std::size_t aks, const T* b,
               std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  constexpr std::size_t W = kLanes<T>;
  std::size_t j = 0;
  for (; j + 4 * W <= m; j += 4 * W) block<T, RB, 4>(k, a, ars, aks, b + j, ldb, c + j, ldc, accumulate);
  for (; j + 2 * W <= m; j += 2 * W) block<T, RB, 2>(k, a, ars, aks, b + j, ldb, c + j, ldc, accumulate);
  for (; j + W <= m; j += W) block<T, RB, 1>(k, a, ars, aks, b + j, ldb, c + j, ldc, accumulate);
  if (j < m) scalar_tail<T>(RB, m - j, k, a, ars, aks, b + j, ldb, c + j, ldc, accumulate);
}

template <typename T>
void gemm_rows(std::size_t n, std::size_t m, std::size_t k, const T* a, std::size_t ars, std::size_t aks,
               const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  std::size_t i = 0;
  for (; i + 6 <= n; i += 6) row_panel<T, 6>(m, k, a + i * ars, ars, aks, b, ldb, c + i * ldc, ldc, accumulate);
  for (; i + 2 <= n; i += 2) row_panel<T, 2>(m, k, a + i * ars, ars, aks, b, ldb, c + i * ldc, ldc, accumulate);
  for (; i < n; ++i) row_panel<T, 1>(m, k, a + i * ars, ars, aks, b, ldb, c + i * ldc, ldc, accumulate);
}

// Tiled so both sides stay in cache.
template <typename T>
void transpose_into(std::vector<T>& dst, const T* src, std::size_t rows, std::size_t cols,
                    std::size_t ld) {
  constexpr std::size_t kTile = 32;
  dst.resize(rows * cols);
  for (std::size_t r0 = 0; r0 < rows; r0 += kTile) {
    const std::size_t r1 = std::min(rows, r0 + kTile);
    for (std::size_t c0 = 0; c0 < cols; c0 += kTile) {
      const std::size_t c1 = std::min(cols, c0 + kTile);
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * ld + c];
    }
  }
}

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t n, std::size_t m, std::size_t k, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  if (n == 0 || m == 0) return;
  if (k == 0) {
    if (!accumulate)
      for (std::size_t i = 0; i < n; ++i) std::fill(c + i * ldc, c + i * ldc + m, T(0));
    return;
  }
  thread_local std::vector<T> pack_b;
  if (trans_b) {
    // stored as m×k
    transpose_into(pack_b, b, m, k, ldb);
    b = pack_b.data();
    ldb = m;
  }
  // a transposed A is stored k×n
  const std::size_t ars = trans_a ? 1 : lda;
  const std::size_t aks = trans_a ? lda : 1;
  gemm_rows<T>(n, m, k, a, ars, aks, b, ldb, c, ldc, accumulate);
}

template void gemm<float>(bool, bool, std::size_t, std::size_t, std::size_t, const float*, std::size_t,
                          const float*, std::size_t, float*, std::size_t, bool);
template void gemm<double>(bool, bool, std::size_t, std::size_t, std::size_t, const double*,
                           std::size_t, const double*, std::size_t, double*, std::size_t, bool);

}  // namespace lmoe::kernels
