#ifndef IBIT_MATRIX_HPP_
#define IBIT_MATRIX_HPP_

#include <cstddef>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ibit {

// Dense row-major matrix of doubles. Rank-3/4 tensors are carried as
// (batch, head)-indexed collections of these.
class Matrix {
  public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    // Checked: data.size() must equal rows*cols and every value must be finite.
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix identity(std::size_t n);
    static Matrix ones(std::size_t rows, std::size_t cols) { return Matrix(rows, cols, 1.0); }
    static Matrix uniform(std::size_t rows, std::size_t cols, double lo, double hi, std::mt19937_64 &rng);
    static Matrix normal(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64 &rng);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double &operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double &operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    double *data() noexcept { return data_.data(); }
    const double *data() const noexcept { return data_.data(); }
    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }

    bool same_shape(const Matrix &o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
    std::string shape_string() const;
    bool all_finite() const noexcept;

    double sum() const noexcept;
    Matrix transposed() const;

    Matrix &operator+=(const Matrix &o);
    Matrix &operator-=(const Matrix &o);
    Matrix &operator*=(double s) noexcept;

    friend bool operator==(const Matrix &a, const Matrix &b) = default;

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix &b);
Matrix operator-(Matrix a, const Matrix &b);
Matrix operator*(double s, Matrix a);

Matrix matmul(const Matrix &a, const Matrix &b);
// a * b^T
Matrix matmul_nt(const Matrix &a, const Matrix &b);
// a^T * b
Matrix matmul_tn(const Matrix &a, const Matrix &b);
Matrix elementwise_mul(const Matrix &a, const Matrix &b);

double max_abs_diff(const Matrix &a, const Matrix &b);
// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
double max_rel_diff(const Matrix &a, const Matrix &b, double floor = 1e-8);
double mean_squared_error(const Matrix &a, const Matrix &b);

void require_same_shape(const Matrix &a, const Matrix &b, const char *op);

} // namespace ibit

#endif // IBIT_MATRIX_HPP_
