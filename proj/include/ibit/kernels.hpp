#ifndef IBIT_KERNELS_HPP_
#define IBIT_KERNELS_HPP_

#include <cstddef>

// Dense GEMM-style kernels on raw row-major buffers. Every kernel overwrites
// its output. The OpenMP versions split work over output rows only, and each
// output element is accumulated in the same order as the serial reference, so
// results are bitwise identical for any thread count.
namespace ibit::kernels {

namespace serial {
// c(m x n) = a(m x k) * b(k x n)
void gemm_nn(const double *a, const double *b, double *c, std::size_t m, std::size_t k, std::size_t n);
// c(m x n) = a(m x k) * b(n x k)^T
void gemm_nt(const double *a, const double *b, double *c, std::size_t m, std::size_t k, std::size_t n);
// c(m x n) = a(k x m)^T * b(k x n)
void gemm_tn(const double *a, const double *b, double *c, std::size_t m, std::size_t k, std::size_t n);
void hadamard(const double *a, const double *b, double *c, std::size_t len);
} // namespace serial

namespace parallel {
void gemm_nn(const double *a, const double *b, double *c, std::size_t m, std::size_t k, std::size_t n);
void gemm_nt(const double *a, const double *b, double *c, std::size_t m, std::size_t k, std::size_t n);
void gemm_tn(const double *a, const double *b, double *c, std::size_t m, std::size_t k, std::size_t n);
void hadamard(const double *a, const double *b, double *c, std::size_t len);
} // namespace parallel

// Worker count used by the parallel kernels; 0 leaves the OpenMP default.
void set_num_threads(int n);
int max_threads();

} // namespace ibit::kernels

#endif // IBIT_KERNELS_HPP_
