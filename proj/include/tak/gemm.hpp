#pragma once

namespace tak {

// Row-major GEMM: C = alpha * op(A) @ op(B) + beta * C.
// Backed by single-threaded BLAS when available (kept single-threaded so
// training runs are bit-reproducible); falls back to a blocked loop nest.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
          const double* a, int lda, const double* b, int ldb, double beta,
          double* c, int ldc);

}  // namespace tak
