// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>

namespace lmoe::kernels {

/// C = op(A)·op(B), or C += op(A)·op(B) when `accumulate`.
///
/// op(A) is n×k, op(B) is k×m, C is n×m; all row-major with leading
/// dimensions lda/ldb/ldc. Transposed operands are packed first.
///
/// Reduction order: every output element is the left-to-right sum
/// a[i,0]·b[0,j] + a[i,1]·b[1,j] + ... starting from zero, and is added to
/// the previous C value last when accumulating. Results are therefore
/// bitwise reproducible and independent of the blocking.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t n, std::size_t m, std::size_t k, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate);

}  // namespace lmoe::kernels
