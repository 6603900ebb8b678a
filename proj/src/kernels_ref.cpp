// Naive serial reference kernels. Slow on purpose: three plain loops, no
// tiling, no pragmas, and built with auto-vectorization off (see the cmake
// source property) so every accumulation is a scalar k-ascending FMA chain --
// the same per-element order the tiled kernels use, which is what lets tests
// demand bit-for-bit agreement. The benchmark reports the speedup.

#include <cmath>

#include "actlab/kernels.hpp"

namespace actlab::kernels::ref {

void gemm_nn(const double* a, const double* b, double* c, idx m, idx k, idx n,
             bool accumulate) {
    for (idx i = 0; i < m; ++i)
        for (idx j = 0; j < n; ++j) {
            double t = 0.0;
            for (idx p = 0; p < k; ++p) t += a[i * k + p] * b[p * n + j];
            c[i * n + j] = accumulate ? c[i * n + j] + t : t;
        }
}

void gemm_nt(const double* a, const double* b, double* c, idx m, idx k, idx n,
             bool accumulate) {
    for (idx i = 0; i < m; ++i)
        for (idx j = 0; j < n; ++j) {
            double t = 0.0;
            for (idx p = 0; p < k; ++p) t += a[i * k + p] * b[j * k + p];
            c[i * n + j] = accumulate ? c[i * n + j] + t : t;
        }
}

void gemm_tn(const double* a, const double* b, double* c, idx m, idx k, idx n,
             bool accumulate) {
    for (idx i = 0; i < m; ++i)
        for (idx j = 0; j < n; ++j) {
            double t = 0.0;
            for (idx p = 0; p < k; ++p) t += a[p * m + i] * b[p * n + j];
            c[i * n + j] = accumulate ? c[i * n + j] + t : t;
        }
}

void softmax_rows(const double* x, double* y, idx rows, idx cols) {
    for (idx i = 0; i < rows; ++i) {
        const double* xr = x + i * cols;
        double* yr = y + i * cols;
        double mx = xr[0];
        for (idx j = 1; j < cols; ++j) mx = xr[j] > mx ? xr[j] : mx;
        double sum = 0.0;
        for (idx j = 0; j < cols; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        const double inv = 1.0 / sum;
        for (idx j = 0; j < cols; ++j) yr[j] *= inv;
    }
}

}  // namespace actlab::kernels::ref
