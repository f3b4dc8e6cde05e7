#ifndef IBIT_MASK_HPP_
#define IBIT_MASK_HPP_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <vector>

#include "ibit/convattn.hpp"
#include "ibit/matrix.hpp"

namespace ibit {

// Row q circularly shifted left by q: out[q][c] = m[q][(c + q) mod n].
Matrix roll_rows(const Matrix &m);
// Inverse of roll_rows: out[q][(c + q) mod n] = m[q][c].
Matrix unroll_rows(const Matrix &m);

struct GaussianTargetSpec {
    GridGeometry geom;
    double sigma = 1.5;
    // Entries with grid distance above this radius are zeroed.
    std::optional<double> window;

    void validate() const;
};

// Radial attention map exp(-d^2 / (2 sigma^2)) between grid cells, each row
// normalized to sum to one unless row_normalize is false.
Matrix gaussian_attention_target(const GaussianTargetSpec &spec, bool row_normalize = true);

// Low-rank factors of the rolled inductive mask. A and B are
// mask_fidelity x seq_len; the rolled mask is A^T * B.
class SubMaskPair {
  public:
    SubMaskPair(Matrix a, Matrix b);

    // Uniform on [-s, s] with s = sqrt(1 / seq_len).
    static SubMaskPair random(std::size_t mask_fidelity, std::size_t seq_len, std::mt19937_64 &rng);

    const Matrix &a() const noexcept { return a_; }
    const Matrix &b() const noexcept { return b_; }
    Matrix &a() noexcept { return a_; }
    Matrix &b() noexcept { return b_; }
    std::size_t mask_fidelity() const noexcept { return a_.rows(); }
    std::size_t seq_len() const noexcept { return a_.cols(); }

    friend bool operator==(const SubMaskPair &, const SubMaskPair &) = default;

  private:
    Matrix a_;
    Matrix b_;
};

// unroll_rows(A^T * B): the inductive mask in attention space.
Matrix compose_mask(const SubMaskPair &pair);

struct MaskTrainingOptions {
    std::size_t epochs = 2000;
    double lr = 0.1;
    std::uint64_t seed = 0;
    // Stop once the per-entry MSE falls below this; 0 disables.
    double early_stop_mse = 1e-4;
};

struct MaskTrainingResult {
    SubMaskPair pair;
    // Per-entry MSE before each gradient step, then the final value.
    std::vector<double> mse_history;
    double initial_mse = 0.0;
    double final_mse = 0.0;
};

// Full-batch gradient descent of A, B on the rolled target. The descended
// objective is the squared error summed over each row and averaged over rows
// (seq_len times the per-entry MSE). Throws TrainingError on divergence.
MaskTrainingResult train_mask_weights(const Matrix &rolled_target, std::size_t mask_fidelity,
                                      const MaskTrainingOptions &opts = {});
MaskTrainingResult train_mask_weights(const GaussianTargetSpec &spec, std::size_t mask_fidelity,
                                      const MaskTrainingOptions &opts = {});

// Default sigma for emulating an f x f filter.
inline double default_sigma(std::size_t filter_size) { return static_cast<double>(filter_size) / 2.0; }

// "IBMK" file: magic, version u32, mask_fidelity u32, seq_len u32, then A and
// B row-major as little-endian f64.
inline constexpr std::uint32_t kMaskFileVersion = 1;
void write_mask_pair(std::ostream &os, const SubMaskPair &pair);
SubMaskPair read_mask_pair(std::istream &is);
void save_mask_pair(const std::filesystem::path &path, const SubMaskPair &pair);
SubMaskPair load_mask_pair(const std::filesystem::path &path);

} // namespace ibit

#endif // IBIT_MASK_HPP_
