#include "ibit/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "ibit/errors.hpp"

namespace ibit {

std::size_t numerical_rank(const Matrix &m, double tol) {
    if (m.empty())
        throw DimensionError("numerical_rank: empty matrix");
    if (!(tol > 0.0))
        throw ConfigError("numerical_rank: tol must be positive");

    Matrix w = m;
    const std::size_t rows = w.rows();
    const std::size_t cols = w.cols();
    std::vector<std::size_t> col_perm(cols);
    for (std::size_t c = 0; c < cols; ++c)
        col_perm[c] = c;

    std::size_t rank = 0;
    double first_pivot = 0.0;
    for (std::size_t step = 0; step < std::min(rows, cols); ++step) {
        std::size_t pr = step;
        std::size_t pc = step;
        double best = 0.0;
        for (std::size_t r = step; r < rows; ++r)
            for (std::size_t c = step; c < cols; ++c)
                if (std::abs(w(r, c)) > best) {
                    best = std::abs(w(r, c));
                    pr = r;
                    pc = c;
                }
        if (step == 0)
            first_pivot = best;
        if (best == 0.0 || best <= tol * first_pivot)
            break;
        if (pr != step)
            for (std::size_t c = 0; c < cols; ++c)
                std::swap(w(pr, c), w(step, c));
        if (pc != step)
            for (std::size_t r = 0; r < rows; ++r)
                std::swap(w(r, pc), w(r, step));
        const double pivot = w(step, step);
        for (std::size_t r = step + 1; r < rows; ++r) {
            const double factor = w(r, step) / pivot;
            if (factor == 0.0)
                continue;
            for (std::size_t c = step; c < cols; ++c)
                w(r, c) -= factor * w(step, c);
        }
        ++rank;
    }
    return rank;
}

Matrix finite_diff_grad(const ScalarFn &f, const Matrix &at, double eps) {
    if (!(eps > 0.0))
        throw ConfigError("finite_diff_grad: eps must be positive");
    Matrix x = at;
    Matrix g(at.rows(), at.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + eps;
        const double fp = f(x);
        x[i] = orig - eps;
        const double fm = f(x);
        x[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw TrainingError("finite_diff_grad: non-finite function value at entry " + std::to_string(i), i);
        g[i] = (fp - fm) / (2.0 * eps);
    }
    return g;
}

} // namespace ibit
