#include "ibit/kernels.hpp"

#include <algorithm>
#include <vector>

namespace ibit::kernels::serial {

void gemm_nn(const double *a, const double *b, double *c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double *ci = c + i * n;
        std::fill(ci, ci + n, 0.0);
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            const double *bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j)
                ci[j] += aip * bp[j];
        }
    }
}

void gemm_nt(const double *a, const double *b, double *c, std::size_t m, std::size_t k, std::size_t n) {
    // b^T is materialized so the inner loop runs over contiguous memory; each
    // c(i,j) still accumulates p = 0..k-1 in order.
    std::vector<double> bt(k * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t p = 0; p < k; ++p)
            bt[p * n + j] = b[j * k + p];
    gemm_nn(a, bt.data(), c, m, k, n);
}

void gemm_tn(const double *a, const double *b, double *c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double *ci = c + i * n;
        std::fill(ci, ci + n, 0.0);
        for (std::size_t p = 0; p < k; ++p) {
            const double api = a[p * m + i];
            const double *bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j)
                ci[j] += api * bp[j];
        }
    }
}

void hadamard(const double *a, const double *b, double *c, std::size_t len) {
    for (std::size_t i = 0; i < len; ++i)
        c[i] = a[i] * b[i];
}

} // namespace ibit::kernels::serial
