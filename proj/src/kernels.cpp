#include "actlab/kernels.hpp"

#include <cmath>
#include <vector>

namespace actlab::kernels {

namespace {

constexpr idx kNr = 8;  // column tile, one cache line of doubles

// Computes an ir x kNr tile of C, keeping the accumulators in registers and
// walking k in ascending order -- the same per-element order the naive
// reference uses, so the two agree bit for bit (modulo FMA contraction).
template <int ir, bool acc>
inline void micro_nn(const double* a, const double* b, double* c, idx k, idx n,
                     idx i0, idx j0) {
    double t[ir][kNr];
    for (int r = 0; r < ir; ++r)
        for (int j = 0; j < kNr; ++j) t[r][j] = 0.0;
    for (idx p = 0; p < k; ++p) {
        const double* brow = b + p * n + j0;
        double av[ir];
        for (int r = 0; r < ir; ++r) av[r] = a[(i0 + r) * k + p];
        for (int r = 0; r < ir; ++r)
            for (int j = 0; j < kNr; ++j) t[r][j] += av[r] * brow[j];
    }
    for (int r = 0; r < ir; ++r) {
        double* crow = c + (i0 + r) * n + j0;
        for (int j = 0; j < kNr; ++j) crow[j] = acc ? crow[j] + t[r][j] : t[r][j];
    }
}

// Same tile shape for C = A^T * B; for a fixed k both operands are read along
// contiguous rows.
template <int ir, bool acc>
inline void micro_tn(const double* a, const double* b, double* c, idx k, idx m,
                     idx n, idx i0, idx j0) {
    double t[ir][kNr];
    for (int r = 0; r < ir; ++r)
        for (int j = 0; j < kNr; ++j) t[r][j] = 0.0;
    for (idx p = 0; p < k; ++p) {
        const double* arow = a + p * m + i0;
        const double* brow = b + p * n + j0;
        for (int r = 0; r < ir; ++r)
            for (int j = 0; j < kNr; ++j) t[r][j] += arow[r] * brow[j];
    }
    for (int r = 0; r < ir; ++r) {
        double* crow = c + (i0 + r) * n + j0;
        for (int j = 0; j < kNr; ++j) crow[j] = acc ? crow[j] + t[r][j] : t[r][j];
    }
}

template <bool acc>
void gemm_nn_impl(const double* a, const double* b, double* c, idx m, idx k, idx n) {
    const idx jmain = n - n % kNr;
#pragma omp parallel for schedule(static)
    for (idx i0 = 0; i0 < m; i0 += 4) {
        const idx ir = (m - i0 >= 4) ? 4 : m - i0;
        for (idx j0 = 0; j0 < jmain; j0 += kNr) {
            switch (ir) {
                case 4: micro_nn<4, acc>(a, b, c, k, n, i0, j0); break;
                case 3: micro_nn<3, acc>(a, b, c, k, n, i0, j0); break;
                case 2: micro_nn<2, acc>(a, b, c, k, n, i0, j0); break;
                default: micro_nn<1, acc>(a, b, c, k, n, i0, j0); break;
            }
        }
        for (idx i = i0; i < i0 + ir; ++i)
            for (idx j = jmain; j < n; ++j) {
                double t = 0.0;
                for (idx p = 0; p < k; ++p) t += a[i * k + p] * b[p * n + j];
                c[i * n + j] = acc ? c[i * n + j] + t : t;
            }
    }
}

template <bool acc>
void gemm_tn_impl(const double* a, const double* b, double* c, idx m, idx k, idx n) {
    const idx jmain = n - n % kNr;
#pragma omp parallel for schedule(static)
    for (idx i0 = 0; i0 < m; i0 += 4) {
        const idx ir = (m - i0 >= 4) ? 4 : m - i0;
        for (idx j0 = 0; j0 < jmain; j0 += kNr) {
            switch (ir) {
                case 4: micro_tn<4, acc>(a, b, c, k, m, n, i0, j0); break;
                case 3: micro_tn<3, acc>(a, b, c, k, m, n, i0, j0); break;
                case 2: micro_tn<2, acc>(a, b, c, k, m, n, i0, j0); break;
                default: micro_tn<1, acc>(a, b, c, k, m, n, i0, j0); break;
            }
        }
        for (idx i = i0; i < i0 + ir; ++i)
            for (idx j = jmain; j < n; ++j) {
                double t = 0.0;
                for (idx p = 0; p < k; ++p) t += a[p * m + i] * b[p * n + j];
                c[i * n + j] = acc ? c[i * n + j] + t : t;
            }
    }
}

}  // namespace

void gemm_nn(const double* a, const double* b, double* c, idx m, idx k, idx n,
             bool accumulate) {
    if (accumulate)
        gemm_nn_impl<true>(a, b, c, m, k, n);
    else
        gemm_nn_impl<false>(a, b, c, m, k, n);
}

void gemm_tn(const double* a, const double* b, double* c, idx m, idx k, idx n,
             bool accumulate) {
    if (accumulate)
        gemm_tn_impl<true>(a, b, c, m, k, n);
    else
        gemm_tn_impl<false>(a, b, c, m, k, n);
}

// A * B^T is routed through the nn kernel after transposing B into a scratch
// panel; the transpose is O(n*k) against the O(m*n*k) multiply and keeps the
// k-ascending order per element.
void gemm_nt(const double* a, const double* b, double* c, idx m, idx k, idx n,
             bool accumulate) {
    thread_local std::vector<double> scratch;
    scratch.resize(static_cast<size_t>(k) * n);
    for (idx j = 0; j < n; ++j)
        for (idx p = 0; p < k; ++p) scratch[p * n + j] = b[j * k + p];
    gemm_nn(a, scratch.data(), c, m, k, n, accumulate);
}

void softmax_rows(const double* x, double* y, idx rows, idx cols) {
#pragma omp parallel for schedule(static)
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

}  // namespace actlab::kernels
