#ifndef IBIT_CONVATTN_HPP_
#define IBIT_CONVATTN_HPP_

#include <cstddef>
#include <utility>

#include "ibit/matrix.hpp"

namespace ibit {

// Token-grid shape. seq_len counts patch tokens only (no CLS).
class GridGeometry {
  public:
    GridGeometry(std::size_t height, std::size_t width);

    std::size_t height() const noexcept { return height_; }
    std::size_t width() const noexcept { return width_; }
    std::size_t seq_len() const noexcept { return height_ * width_; }

    friend bool operator==(const GridGeometry &, const GridGeometry &) = default;

  private:
    std::size_t height_;
    std::size_t width_;
};

// Square single-channel filter of side f.
class ConvFilter {
  public:
    explicit ConvFilter(Matrix weights);

    std::size_t size() const noexcept { return weights_.rows(); }
    const Matrix &weights() const noexcept { return weights_; }

  private:
    Matrix weights_;
};

std::size_t flatten_index(std::size_t i, std::size_t j, const GridGeometry &geom);
std::pair<std::size_t, std::size_t> unflatten_index(std::size_t q, const GridGeometry &geom);

// (height x width) image <-> (seq_len x 1) column.
Matrix flatten_grid(const Matrix &x, const GridGeometry &geom);
Matrix unflatten_grid(const Matrix &x_flat, const GridGeometry &geom);

// Y(i,j) = sum_{k,l < f} X(i+k, j+l) * W(k,l); out-of-grid X reads as zero.
Matrix conv2d_reference(const Matrix &x, const ConvFilter &filter, const GridGeometry &geom);

enum class ColumnIndexing { zero_padded, circular };

// seq_len x seq_len matrix M with M[i*w+j][(i+k)*w+(j+l)] = W(k,l) for every
// in-grid tap. With circular indexing row q instead places W(k,l) at flat
// column (q + k*w + l) mod seq_len, so every row is a shift of row 0.
Matrix build_conv_attention_matrix(const ConvFilter &filter, const GridGeometry &geom,
                                   ColumnIndexing indexing = ColumnIndexing::zero_padded);

Matrix attention_apply(const Matrix &attn, const Matrix &x_flat);

} // namespace ibit

#endif // IBIT_CONVATTN_HPP_
