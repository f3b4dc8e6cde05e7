#ifndef IBIT_LMSA_HPP_
#define IBIT_LMSA_HPP_

#include <cstddef>
#include <vector>

#include "ibit/convattn.hpp"
#include "ibit/mask.hpp"
#include "ibit/matrix.hpp"

namespace ibit {

enum class AttentionNorm {
    row_l1,   // each row divided by max(sum |row|, eps)
    frobenius // each head map divided by max(||map||_F, eps)
};

struct LMSAOptions {
    AttentionNorm norm = AttentionNorm::row_l1;
    double eps = 1e-9;
};

// Learned-mask self-attention parameters. Projections act on row vectors:
// Q = X * w_queries. `masks` holds one pair per head, or a single pair shared
// by every head.
struct LMSAParams {
    Matrix w_keys;
    Matrix w_queries;
    Matrix w_values;
    std::vector<SubMaskPair> masks;
    std::size_t num_heads = 1;

    std::size_t d_model() const noexcept { return w_queries.rows(); }
    std::size_t head_dim() const noexcept { return d_model() / num_heads; }
    bool shared_mask() const noexcept { return masks.size() == 1; }
    const SubMaskPair &mask_for_head(std::size_t h) const { return masks.at(shared_mask() ? 0 : h); }

    // Throws DimensionError/ConfigError on inconsistent shapes. masks may be
    // empty only when require_masks is false.
    void validate(const GridGeometry &geom, bool require_masks = true) const;
};

// Everything the forward pass computed, indexed [b * num_heads + h] for the
// per-(sample, head) maps.
struct AttentionTrace {
    std::size_t batch = 0;
    std::size_t seq = 0; // tokens per sample, CLS included
    std::size_t num_heads = 0;
    bool has_cls = false;
    AttentionNorm norm = AttentionNorm::row_l1;
    double eps = 0.0;

    std::vector<Matrix> raw_attention;    // Q_h * K_h^T
    std::vector<Matrix> pre_norm;         // raw_attention (.) applied mask
    std::vector<Matrix> masked_attention; // pre_norm after normalization
    std::vector<Matrix> denominators;     // seq x 1 (row_l1) or 1 x 1 (frobenius), before eps clamp
    std::vector<Matrix> inductive_mask;   // per head, seq_len x seq_len, no CLS extension

    Matrix input;
    Matrix queries;
    Matrix keys;
    Matrix values;

    bool valid() const noexcept { return batch > 0 && !raw_attention.empty(); }
    std::size_t index(std::size_t b, std::size_t h) const noexcept { return b * num_heads + h; }
    // The mask actually multiplied into the scores of head h.
    Matrix applied_mask(std::size_t h) const;
};

struct LMSAResult {
    Matrix output; // (batch * seq) x d_model
    AttentionTrace trace;
};

struct LMSAGradients {
    Matrix input;
    Matrix w_keys;
    Matrix w_queries;
    Matrix w_values;
    std::vector<Matrix> mask_a; // aligned with LMSAParams::masks
    std::vector<Matrix> mask_b;
    std::vector<Matrix> raw_attention; // dJ/d(raw_attention), same indexing as the trace
    std::vector<Matrix> pre_norm;      // dJ/d(pre_norm)
};

// Ones row and column at position 0 around an unextended mask.
Matrix extend_mask_with_cls(const Matrix &mask);

// x is (batch * seq') x d_model with samples stacked row-wise. seq' must be
// geom.seq_len() or geom.seq_len() + 1 (CLS at position 0 of each sample).
LMSAResult lmsa_forward(const Matrix &x, std::size_t batch, const LMSAParams &params, const GridGeometry &geom,
                        const LMSAOptions &opts = {});

// The same pipeline with the inductive mask fixed to all ones; params.masks is
// ignored.
LMSAResult baseline_attention_forward(const Matrix &x, std::size_t batch, const LMSAParams &params,
                                      const GridGeometry &geom, const LMSAOptions &opts = {});

// Exact reverse-mode gradients given dJ/d(output). Mask gradients are empty
// when the trace came from the baseline layer.
LMSAGradients lmsa_backward(const AttentionTrace &trace, const LMSAParams &params, const Matrix &grad_output);

} // namespace ibit

#endif // IBIT_LMSA_HPP_
