#pragma once

// Row-major dgemm wrapper: C = alpha * op(A) * op(B) + beta * C.
// Backed by OpenBLAS, pinned to one BLAS thread; parallelism happens at the
// sample level in this codebase.

namespace gradshift {

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
          int lda, const double* b, int ldb, double beta, double* c, int ldc);

} // namespace gradshift
