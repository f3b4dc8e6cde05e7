#include "ibit/kernels.hpp"

#include <algorithm>
#include <cstdint>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ibit::kernels {

namespace {
// Below this many multiply-adds the fork/join cost dominates.
constexpr std::size_t kParallelWork = 1u << 15;
} // namespace

namespace parallel {

namespace {
// Rows [i0, i0 + 4) of c = a * b, with a given by element accessor. Each
// element still accumulates over p in increasing order.
template <class AElem>
void gemm_rows4(AElem a_at, const double *b, double *c, std::size_t i0, std::size_t k, std::size_t n) {
    double *c0 = c + i0 * n;
    double *c1 = c0 + n;
    double *c2 = c1 + n;
    double *c3 = c2 + n;
    std::fill(c0, c0 + 4 * n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
        const double a0 = a_at(i0, p);
        const double a1 = a_at(i0 + 1, p);
        const double a2 = a_at(i0 + 2, p);
        const double a3 = a_at(i0 + 3, p);
        const double *bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double bj = bp[j];
            c0[j] += a0 * bj;
            c1[j] += a1 * bj;
            c2[j] += a2 * bj;
            c3[j] += a3 * bj;
        }
    }
}

template <class AElem>
void gemm_row(AElem a_at, const double *b, double *c, std::size_t i, std::size_t k, std::size_t n) {
    double *ci = c + i * n;
    std::fill(ci, ci + n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
        const double aip = a_at(i, p);
        const double *bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j)
            ci[j] += aip * bp[j];
    }
}

template <class AElem>
void gemm_blocked(AElem a_at, const double *b, double *c, std::size_t m, std::size_t k, std::size_t n) {
    const auto blocks = static_cast<std::int64_t>(m / 4);
#pragma omp parallel for schedule(static) if (m * k * n >= kParallelWork)
    for (std::int64_t bi = 0; bi < blocks; ++bi)
        gemm_rows4(a_at, b, c, static_cast<std::size_t>(bi) * 4, k, n);
    for (std::size_t i = (m / 4) * 4; i < m; ++i)
        gemm_row(a_at, b, c, i, k, n);
}
} // namespace

void gemm_nn(const double *a, const double *b, double *c, std::size_t m, std::size_t k, std::size_t n) {
    gemm_blocked([a, k](std::size_t i, std::size_t p) { return a[i * k + p]; }, b, c, m, k, n);
}

void gemm_nt(const double *a, const double *b, double *c, std::size_t m, std::size_t k, std::size_t n) {
    std::vector<double> bt(k * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t p = 0; p < k; ++p)
            bt[p * n + j] = b[j * k + p];
    gemm_nn(a, bt.data(), c, m, k, n);
}

void gemm_tn(const double *a, const double *b, double *c, std::size_t m, std::size_t k, std::size_t n) {
    gemm_blocked([a, m](std::size_t i, std::size_t p) { return a[p * m + i]; }, b, c, m, k, n);
}

void hadamard(const double *a, const double *b, double *c, std::size_t len) {
    const auto total = static_cast<std::int64_t>(len);
#pragma omp parallel for schedule(static) if (len >= kParallelWork)
    for (std::int64_t i = 0; i < total; ++i)
        c[i] = a[i] * b[i];
}

} // namespace parallel

void set_num_threads(int n) {
#ifdef _OPENMP
    if (n > 0)
        omp_set_num_threads(n);
#else
    (void)n;
#endif
}

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

} // namespace ibit::kernels
