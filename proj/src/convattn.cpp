#include "ibit/convattn.hpp"

#include <algorithm>
#include <string>

#include "ibit/errors.hpp"

namespace ibit {

GridGeometry::GridGeometry(std::size_t height, std::size_t width) : height_(height), width_(width) {
    if (height == 0 || width == 0)
        throw ConfigError("grid geometry needs height >= 1 and width >= 1");
}

ConvFilter::ConvFilter(Matrix weights) : weights_(std::move(weights)) {
    if (weights_.rows() == 0 || weights_.rows() != weights_.cols())
        throw DimensionError("conv filter must be square and non-empty, got " + weights_.shape_string());
}

std::size_t flatten_index(std::size_t i, std::size_t j, const GridGeometry &geom) {
    if (i >= geom.height() || j >= geom.width())
        throw IndexError("flatten_index: (" + std::to_string(i) + "," + std::to_string(j) + ") outside grid " +
                         std::to_string(geom.height()) + "x" + std::to_string(geom.width()));
    return i * geom.width() + j;
}

std::pair<std::size_t, std::size_t> unflatten_index(std::size_t q, const GridGeometry &geom) {
    if (q >= geom.seq_len())
        throw IndexError("unflatten_index: " + std::to_string(q) + " >= seq_len " + std::to_string(geom.seq_len()));
    return {q / geom.width(), q % geom.width()};
}

Matrix flatten_grid(const Matrix &x, const GridGeometry &geom) {
    if (x.rows() != geom.height() || x.cols() != geom.width())
        throw DimensionError("flatten_grid: image " + x.shape_string() + " does not match grid");
    return Matrix(geom.seq_len(), 1, std::vector<double>(x.values().begin(), x.values().end()));
}

Matrix unflatten_grid(const Matrix &x_flat, const GridGeometry &geom) {
    if (x_flat.rows() != geom.seq_len() || x_flat.cols() != 1)
        throw DimensionError("unflatten_grid: column " + x_flat.shape_string() + " does not match grid");
    return Matrix(geom.height(), geom.width(), std::vector<double>(x_flat.values().begin(), x_flat.values().end()));
}

Matrix conv2d_reference(const Matrix &x, const ConvFilter &filter, const GridGeometry &geom) {
    if (x.rows() != geom.height() || x.cols() != geom.width())
        throw DimensionError("conv2d_reference: image " + x.shape_string() + " does not match grid " +
                             std::to_string(geom.height()) + "x" + std::to_string(geom.width()));
    const std::size_t f = filter.size();
    const Matrix &w = filter.weights();
    Matrix y(geom.height(), geom.width());
    for (std::size_t i = 0; i < geom.height(); ++i)
        for (std::size_t j = 0; j < geom.width(); ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < f; ++k)
                for (std::size_t l = 0; l < f; ++l)
                    if (i + k < geom.height() && j + l < geom.width())
                        acc += x(i + k, j + l) * w(k, l);
            y(i, j) = acc;
        }
    return y;
}

Matrix build_conv_attention_matrix(const ConvFilter &filter, const GridGeometry &geom, ColumnIndexing indexing) {
    const std::size_t f = filter.size();
    if (f > std::min(geom.height(), geom.width()))
        throw ConfigError("build_conv_attention_matrix: filter size " + std::to_string(f) + " exceeds grid " +
                          std::to_string(geom.height()) + "x" + std::to_string(geom.width()));
    const std::size_t h = geom.height();
    const std::size_t w = geom.width();
    Matrix m(geom.seq_len(), geom.seq_len());
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            const std::size_t q = i * w + j;
            for (std::size_t k = 0; k < f; ++k)
                for (std::size_t l = 0; l < f; ++l) {
                    if (indexing == ColumnIndexing::circular) {
                        m(q, (q + k * w + l) % geom.seq_len()) += filter.weights()(k, l);
                    } else if (i + k < h && j + l < w) {
                        m(q, (i + k) * w + (j + l)) = filter.weights()(k, l);
                    }
                }
        }
    return m;
}

Matrix attention_apply(const Matrix &attn, const Matrix &x_flat) {
    if (attn.rows() != attn.cols() || attn.cols() != x_flat.rows())
        throw DimensionError("attention_apply: attention " + attn.shape_string() + " cannot apply to " +
                             x_flat.shape_string());
    return matmul(attn, x_flat);
}

} // namespace ibit
