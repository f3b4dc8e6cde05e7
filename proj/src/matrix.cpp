#include "ibit/matrix.hpp"

#include <algorithm>
#include <cmath>

#include "ibit/errors.hpp"
#include "ibit/kernels.hpp"

namespace ibit {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
        throw DimensionError("matrix data length " + std::to_string(data_.size()) + " does not match shape " +
                             shape_string());
    if (!all_finite())
        throw DimensionError("matrix " + shape_string() + " constructed with non-finite values");
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto &r : rows) {
        if (r.size() != cols_)
            throw DimensionError("ragged initializer list for matrix");
        data_.insert(data_.end(), r.begin(), r.end());
    }
    if (!all_finite())
        throw DimensionError("matrix constructed with non-finite values");
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i)
        m(i, i) = 1.0;
    return m;
}

Matrix Matrix::uniform(std::size_t rows, std::size_t cols, double lo, double hi, std::mt19937_64 &rng) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Matrix m(rows, cols);
    for (auto &v : m.data_)
        v = dist(rng);
    return m;
}

Matrix Matrix::normal(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64 &rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (auto &v : m.data_)
        v = dist(rng);
    return m;
}

std::string Matrix::shape_string() const {
    return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
}

bool Matrix::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Matrix::sum() const noexcept {
    double s = 0.0;
    for (double v : data_)
        s += v;
    return s;
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c)
            t(c, r) = (*this)(r, c);
    return t;
}

Matrix &Matrix::operator+=(const Matrix &o) {
    require_same_shape(*this, o, "add");
    for (std::size_t i = 0; i < data_.size(); ++i)
        data_[i] += o.data_[i];
    return *this;
}

Matrix &Matrix::operator-=(const Matrix &o) {
    require_same_shape(*this, o, "subtract");
    for (std::size_t i = 0; i < data_.size(); ++i)
        data_[i] -= o.data_[i];
    return *this;
}

Matrix &Matrix::operator*=(double s) noexcept {
    for (auto &v : data_)
        v *= s;
    return *this;
}

Matrix operator+(Matrix a, const Matrix &b) { return a += b; }
Matrix operator-(Matrix a, const Matrix &b) { return a -= b; }
Matrix operator*(double s, Matrix a) { return a *= s; }

void require_same_shape(const Matrix &a, const Matrix &b, const char *op) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
}

Matrix matmul(const Matrix &a, const Matrix &b) {
    if (a.cols() != b.rows())
        throw DimensionError("matmul: shape mismatch " + a.shape_string() + " * " + b.shape_string());
    Matrix c(a.rows(), b.cols());
    kernels::parallel::gemm_nn(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
    return c;
}

Matrix matmul_nt(const Matrix &a, const Matrix &b) {
    if (a.cols() != b.cols())
        throw DimensionError("matmul_nt: shape mismatch " + a.shape_string() + " * " + b.shape_string() + "^T");
    Matrix c(a.rows(), b.rows());
    kernels::parallel::gemm_nt(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.rows());
    return c;
}

Matrix matmul_tn(const Matrix &a, const Matrix &b) {
    if (a.rows() != b.rows())
        throw DimensionError("matmul_tn: shape mismatch " + a.shape_string() + "^T * " + b.shape_string());
    Matrix c(a.cols(), b.cols());
    kernels::parallel::gemm_tn(a.data(), b.data(), c.data(), a.cols(), a.rows(), b.cols());
    return c;
}

Matrix elementwise_mul(const Matrix &a, const Matrix &b) {
    require_same_shape(a, b, "elementwise_mul");
    Matrix c(a.rows(), a.cols());
    kernels::parallel::hadamard(a.data(), b.data(), c.data(), a.size());
    return c;
}

double max_abs_diff(const Matrix &a, const Matrix &b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double max_rel_diff(const Matrix &a, const Matrix &b, double floor) {
    require_same_shape(a, b, "max_rel_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
        m = std::max(m, std::abs(a[i] - b[i]) / denom);
    }
    return m;
}

double mean_squared_error(const Matrix &a, const Matrix &b) {
    require_same_shape(a, b, "mean_squared_error");
    if (a.empty())
        return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

} // namespace ibit
