#ifndef IBIT_LINALG_HPP_
#define IBIT_LINALG_HPP_

#include <cstddef>
#include <functional>

#include "ibit/matrix.hpp"

namespace ibit {

inline constexpr double kDefaultRankTol = 1e-8;

// Gaussian elimination with complete pivoting; counts pivots whose magnitude
// exceeds tol * (first, largest pivot). Throws on an empty matrix or tol <= 0.
std::size_t numerical_rank(const Matrix &m, double tol = kDefaultRankTol);

using ScalarFn = std::function<double(const Matrix &)>;

// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) per entry.
// Throws TrainingError if f returns a non-finite value.
Matrix finite_diff_grad(const ScalarFn &f, const Matrix &at, double eps = 1e-5);

} // namespace ibit

#endif // IBIT_LINALG_HPP_
