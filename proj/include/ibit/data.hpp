#ifndef IBIT_DATA_HPP_
#define IBIT_DATA_HPP_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "ibit/matrix.hpp"

namespace ibit {

// Grayscale images with pixels in [0, 1] and integer class labels.
struct LabeledImageSet {
    std::vector<Matrix> images;
    std::vector<int> labels;
    std::size_t num_classes = 0;

    std::size_t size() const noexcept { return images.size(); }
    bool empty() const noexcept { return images.empty(); }
    // Throws FormatError when an invariant is broken.
    void validate() const;
    std::vector<std::size_t> class_counts() const;

    friend bool operator==(const LabeledImageSet &, const LabeledImageSet &) = default;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

// Big-endian IDX image/label pair; pixels scaled by 1/255.
LabeledImageSet load_idx(const std::filesystem::path &images_path, const std::filesystem::path &labels_path);
// Pixels are written as round(255 * v).
void write_idx(const LabeledImageSet &set, const std::filesystem::path &images_path,
               const std::filesystem::path &labels_path);

struct TrainTestSplit {
    LabeledImageSet train;
    LabeledImageSet test;
};

// MNIST file names inside dir (train-images-idx3-ubyte, t10k-labels-idx1-ubyte, ...).
TrainTestSplit load_idx_dir(const std::filesystem::path &dir);
void write_idx_dir(const TrainTestSplit &split, const std::filesystem::path &dir);

enum class ShapeClass : int { filled_square = 0, hollow_square = 1, cross = 2, disk = 3 };
inline constexpr std::size_t kShapeClasses = 4;

// n images of size x size with one shape each, at a random position and
// scale, plus Gaussian noise. Labels cycle through the four classes before a
// seeded shuffle. Pixels are quantized to multiples of 1/255.
LabeledImageSet synth_shapes(std::size_t n, std::size_t size, std::uint64_t seed);

// Deterministic stratified subsample of ceil(fraction * n) items, kept in
// original order. Each class is shuffled with the seed and items are taken in
// order of (rank within class + 0.5) / class size, so smaller fractions give
// subsets of larger ones.
LabeledImageSet subset_fraction(const LabeledImageSet &set, double fraction, std::uint64_t seed);

} // namespace ibit

#endif // IBIT_DATA_HPP_
