// SPDX-License-Identifier: Apache-2.0
// Row-major GEMM dispatch onto CBLAS for float and double.
#pragma once

#include <cblas.h>

#include <cstddef>

namespace lasd::detail {

enum class Trans { no, yes };

inline CBLAS_TRANSPOSE to_cblas(Trans t) {
  return t == Trans::yes ? CblasTrans : CblasNoTrans;
}

// C[MxN] = alpha * op(A)[MxK] * op(B)[KxN] + beta * C
inline void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n,
                 std::size_t k, float alpha, const float *a, std::size_t lda,
                 const float *b, std::size_t ldb, float beta, float *c,
                 std::size_t ldc) {
  if (m == 0 || n == 0)
    return;
  cblas_sgemm(CblasRowMajor, to_cblas(ta), to_cblas(tb), int(m), int(n),
              int(k), alpha, a, int(lda), b, int(ldb), beta, c, int(ldc));
}

inline void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n,
                 std::size_t k, double alpha, const double *a, std::size_t lda,
                 const double *b, std::size_t ldb, double beta, double *c,
                 std::size_t ldc) {
  if (m == 0 || n == 0)
    return;
  cblas_dgemm(CblasRowMajor, to_cblas(ta), to_cblas(tb), int(m), int(n),
              int(k), alpha, a, int(lda), b, int(ldb), beta, c, int(ldc));
}

} // namespace lasd::detail
