#ifndef IBIT_EXPLAIN_HPP_
#define IBIT_EXPLAIN_HPP_

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ibit/convattn.hpp"
#include "ibit/lmsa.hpp"
#include "ibit/matrix.hpp"
#include "ibit/model.hpp"

namespace ibit {

// CLS-to-patch attribution over the token grid; non-negative, sums to one.
struct RolloutMap {
    GridGeometry geom;
    Matrix values; // height x width
};

// One layer's rollout factor: head-averaged |masked attention| of `sample`,
// plus identity, rows renormalized to sum to one.
Matrix rollout_layer_matrix(const AttentionTrace &trace, std::size_t sample = 0);

// Product of the per-layer factors (last layer leftmost); returns the CLS row
// over patch positions reshaped to the grid and renormalized.
RolloutMap attention_rollout(std::span<const AttentionTrace *const> traces, const GridGeometry &geom,
                             std::size_t sample = 0);

// Forward `image` through the model and roll out its attention.
RolloutMap model_rollout(const Model &model, const Matrix &image);

struct HeatmapFiles {
    std::filesystem::path csv;
    std::filesystem::path pgm;
};

// Writes <base>.csv (raw values, %.17g) and <base>.pgm (P5, min-max scaled to
// 0..255, all 128 for a constant matrix).
HeatmapFiles export_heatmap(const Matrix &m, const std::filesystem::path &base);
std::vector<unsigned char> heatmap_pixels(const Matrix &m);

// Reads an 8-bit P5 image into [0, 1] values.
Matrix read_pgm(const std::filesystem::path &path);

// Composes the (layer, head) mask of every checkpoint and exports it as
// <prefix>_epochNNN.{csv,pgm}. Checkpoints must share a config.
std::vector<HeatmapFiles> export_mask_evolution(std::span<const ModelCheckpoint> checkpoints, std::size_t layer,
                                                std::size_t head, const std::filesystem::path &prefix);

// Fraction of sum |m| on entries whose grid cells lie within `radius`
// (Euclidean) of each other.
double diagonal_band_mass(const Matrix &mask, const GridGeometry &geom, double radius);

} // namespace ibit

#endif // IBIT_EXPLAIN_HPP_
