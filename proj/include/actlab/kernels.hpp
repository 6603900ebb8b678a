#pragma once

// Hot loops live here. Every kernel parallelizes over output rows with
// OpenMP while keeping the per-element reduction order fixed (k ascending),
// so results are bit-identical for any thread count. The ref:: versions are
// deliberately naive serial loops kept as the ground truth for tests and for
// the kernel benchmark.

#include <cstdint>

namespace actlab::kernels {

using idx = std::int64_t;

// c[m x n] = a[m x k] * b[k x n]        (+= when accumulate)
void gemm_nn(const double* a, const double* b, double* c, idx m, idx k, idx n,
             bool accumulate = false);
// c[m x n] = a[m x k] * b[n x k]^T
void gemm_nt(const double* a, const double* b, double* c, idx m, idx k, idx n,
             bool accumulate = false);
// c[m x n] = a[k x m]^T * b[k x n]
void gemm_tn(const double* a, const double* b, double* c, idx m, idx k, idx n,
             bool accumulate = false);

// Row-wise softmax with max subtraction. -inf logits map to exactly 0.
// Precondition (checked by the tensor layer): every row has a finite max.
void softmax_rows(const double* x, double* y, idx rows, idx cols);

namespace ref {
void gemm_nn(const double* a, const double* b, double* c, idx m, idx k, idx n,
             bool accumulate = false);
void gemm_nt(const double* a, const double* b, double* c, idx m, idx k, idx n,
             bool accumulate = false);
void gemm_tn(const double* a, const double* b, double* c, idx m, idx k, idx n,
             bool accumulate = false);
void softmax_rows(const double* x, double* y, idx rows, idx cols);
}  // namespace ref

}  // namespace actlab::kernels
