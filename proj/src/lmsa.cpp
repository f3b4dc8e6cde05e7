#include "ibit/lmsa.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include "ibit/errors.hpp"

namespace ibit {

namespace {

// rows [row0, row0 + rows) x cols [col0, col0 + cols) of m
Matrix block(const Matrix &m, std::size_t row0, std::size_t rows, std::size_t col0, std::size_t cols) {
    Matrix out(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto src = m.row(row0 + r).subspan(col0, cols);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

void add_block(Matrix &m, const Matrix &src, std::size_t row0, std::size_t col0) {
    for (std::size_t r = 0; r < src.rows(); ++r) {
        auto dst = m.row(row0 + r).subspan(col0, src.cols());
        const auto s = src.row(r);
        for (std::size_t c = 0; c < src.cols(); ++c)
            dst[c] += s[c];
    }
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

std::size_t tokens_per_sample(const Matrix &x, std::size_t batch, const GridGeometry &geom, bool &has_cls) {
    if (batch == 0 || x.rows() % batch != 0)
        throw DimensionError("lmsa: input rows " + std::to_string(x.rows()) + " not divisible by batch " +
                             std::to_string(batch));
    const std::size_t seq = x.rows() / batch;
    if (seq == geom.seq_len())
        has_cls = false;
    else if (seq == geom.seq_len() + 1)
        has_cls = true;
    else
        throw DimensionError("lmsa: " + std::to_string(seq) + " tokens per sample inconsistent with grid of " +
                             std::to_string(geom.seq_len()) + " cells");
    return seq;
}

LMSAResult forward_impl(const Matrix &x, std::size_t batch, const LMSAParams &params, const GridGeometry &geom,
                        const LMSAOptions &opts, bool use_masks) {
    params.validate(geom, use_masks);
    if (x.cols() != params.d_model())
        throw DimensionError("lmsa: input " + x.shape_string() + " does not match d_model " +
                             std::to_string(params.d_model()));
    if (!(opts.eps > 0.0))
        throw ConfigError("lmsa: eps must be positive");

    AttentionTrace t;
    t.batch = batch;
    t.seq = tokens_per_sample(x, batch, geom, t.has_cls);
    t.num_heads = params.num_heads;
    t.norm = opts.norm;
    t.eps = opts.eps;
    t.input = x;
    t.queries = matmul(x, params.w_queries);
    t.keys = matmul(x, params.w_keys);
    t.values = matmul(x, params.w_values);

    std::vector<Matrix> applied(params.num_heads);
    if (use_masks) {
        t.inductive_mask.resize(params.num_heads);
        for (std::size_t h = 0; h < params.num_heads; ++h) {
            t.inductive_mask[h] = (h > 0 && params.shared_mask()) ? t.inductive_mask[0]
                                                                  : compose_mask(params.mask_for_head(h));
            applied[h] = t.has_cls ? extend_mask_with_cls(t.inductive_mask[h]) : t.inductive_mask[h];
        }
    } else {
        for (auto &m : applied)
            m = Matrix::ones(t.seq, t.seq);
    }

    const std::size_t items = batch * params.num_heads;
    const std::size_t dh = params.head_dim();
    t.raw_attention.resize(items);
    t.pre_norm.resize(items);
    t.masked_attention.resize(items);
    t.denominators.resize(items);
    std::vector<Matrix> head_out(items);

    const auto total = static_cast<std::int64_t>(items);
#pragma omp parallel for schedule(static)
    for (std::int64_t it = 0; it < total; ++it) {
        const auto idx = static_cast<std::size_t>(it);
        const std::size_t b = idx / params.num_heads;
        const std::size_t h = idx % params.num_heads;
        const Matrix qh = block(t.queries, b * t.seq, t.seq, h * dh, dh);
        const Matrix kh = block(t.keys, b * t.seq, t.seq, h * dh, dh);
        const Matrix vh = block(t.values, b * t.seq, t.seq, h * dh, dh);

        Matrix raw = matmul_nt(qh, kh);
        Matrix pre = elementwise_mul(raw, applied[h]);
        Matrix normed = pre;
        Matrix denom;
        if (opts.norm == AttentionNorm::row_l1) {
            denom = Matrix(t.seq, 1);
            for (std::size_t r = 0; r < t.seq; ++r) {
                double s = 0.0;
                for (double v : pre.row(r))
                    s += std::abs(v);
                denom[r] = s;
                const double d = std::max(s, opts.eps);
                for (double &v : normed.row(r))
                    v /= d;
            }
        } else {
            double s = 0.0;
            for (double v : pre.values())
                s += v * v;
            denom = Matrix(1, 1, std::sqrt(s));
            normed *= 1.0 / std::max(denom[0], opts.eps);
        }
        head_out[idx] = matmul(normed, vh);
        t.raw_attention[idx] = std::move(raw);
        t.pre_norm[idx] = std::move(pre);
        t.masked_attention[idx] = std::move(normed);
        t.denominators[idx] = std::move(denom);
    }

    Matrix out(x.rows(), params.d_model());
    for (std::size_t idx = 0; idx < items; ++idx) {
        const std::size_t b = idx / params.num_heads;
        const std::size_t h = idx % params.num_heads;
        add_block(out, head_out[idx], b * t.seq, h * dh);
    }
    return LMSAResult{std::move(out), std::move(t)};
}

} // namespace

void LMSAParams::validate(const GridGeometry &geom, bool require_masks) const {
    const std::size_t d = w_queries.rows();
    for (const Matrix *w : {&w_keys, &w_queries, &w_values})
        if (w->rows() != d || w->cols() != d || d == 0)
            throw DimensionError("lmsa: projection " + w->shape_string() + " is not d_model x d_model");
    if (num_heads == 0 || d % num_heads != 0)
        throw ConfigError("lmsa: d_model " + std::to_string(d) + " not divisible by num_heads " +
                          std::to_string(num_heads));
    if (!require_masks)
        return;
    if (masks.size() != 1 && masks.size() != num_heads)
        throw ConfigError("lmsa: expected 1 or " + std::to_string(num_heads) + " sub-mask pairs, got " +
                          std::to_string(masks.size()));
    for (const auto &m : masks)
        if (m.seq_len() != geom.seq_len())
            throw DimensionError("lmsa: sub-mask seq_len " + std::to_string(m.seq_len()) + " != grid seq_len " +
                                 std::to_string(geom.seq_len()));
}

Matrix AttentionTrace::applied_mask(std::size_t h) const {
    if (inductive_mask.empty())
        return Matrix::ones(seq, seq);
    return has_cls ? extend_mask_with_cls(inductive_mask.at(h)) : inductive_mask.at(h);
}

Matrix extend_mask_with_cls(const Matrix &mask) {
    if (mask.rows() != mask.cols())
        throw DimensionError("extend_mask_with_cls: mask " + mask.shape_string() + " is not square");
    const std::size_t n = mask.rows() + 1;
    Matrix out(n, n, 1.0);
    for (std::size_t r = 1; r < n; ++r)
        for (std::size_t c = 1; c < n; ++c)
            out(r, c) = mask(r - 1, c - 1);
    return out;
}

LMSAResult lmsa_forward(const Matrix &x, std::size_t batch, const LMSAParams &params, const GridGeometry &geom,
                        const LMSAOptions &opts) {
    return forward_impl(x, batch, params, geom, opts, true);
}

LMSAResult baseline_attention_forward(const Matrix &x, std::size_t batch, const LMSAParams &params,
                                      const GridGeometry &geom, const LMSAOptions &opts) {
    return forward_impl(x, batch, params, geom, opts, false);
}

LMSAGradients lmsa_backward(const AttentionTrace &t, const LMSAParams &params, const Matrix &grad_output) {
    if (!t.valid())
        throw StateError("lmsa_backward: no forward trace");
    if (grad_output.rows() != t.batch * t.seq || grad_output.cols() != params.d_model())
        throw DimensionError("lmsa_backward: upstream gradient " + grad_output.shape_string() +
                             " does not match layer output");
    const bool use_masks = !t.inductive_mask.empty();
    const std::size_t dh = params.head_dim();
    const std::size_t items = t.batch * t.num_heads;

    std::vector<Matrix> applied(t.num_heads);
    for (std::size_t h = 0; h < t.num_heads; ++h)
        applied[h] = t.applied_mask(h);

    LMSAGradients g;
    g.raw_attention.resize(items);
    g.pre_norm.resize(items);
    std::vector<Matrix> gq(items), gk(items), gv(items), gmask(items);

    const auto total = static_cast<std::int64_t>(items);
#pragma omp parallel for schedule(static)
    for (std::int64_t it = 0; it < total; ++it) {
        const auto idx = static_cast<std::size_t>(it);
        const std::size_t b = idx / t.num_heads;
        const std::size_t h = idx % t.num_heads;
        const Matrix qh = block(t.queries, b * t.seq, t.seq, h * dh, dh);
        const Matrix kh = block(t.keys, b * t.seq, t.seq, h * dh, dh);
        const Matrix vh = block(t.values, b * t.seq, t.seq, h * dh, dh);
        const Matrix go = block(grad_output, b * t.seq, t.seq, h * dh, dh);
        const Matrix &pre = t.pre_norm[idx];
        const Matrix &normed = t.masked_attention[idx];
        const Matrix &denom = t.denominators[idx];

        const Matrix gn = matmul_nt(go, vh);
        gv[idx] = matmul_tn(normed, go);

        Matrix gp(t.seq, t.seq);
        if (t.norm == AttentionNorm::row_l1) {
            for (std::size_t r = 0; r < t.seq; ++r) {
                const auto gnr = gn.row(r);
                const auto pr = pre.row(r);
                auto gpr = gp.row(r);
                if (denom[r] > t.eps) {
                    const double d = denom[r];
                    double dot = 0.0;
                    for (std::size_t c = 0; c < t.seq; ++c)
                        dot += gnr[c] * pr[c];
                    for (std::size_t c = 0; c < t.seq; ++c)
                        gpr[c] = gnr[c] / d - dot / (d * d) * sign(pr[c]);
                } else {
                    for (std::size_t c = 0; c < t.seq; ++c)
                        gpr[c] = gnr[c] / t.eps;
                }
            }
        } else {
            const double f = denom[0];
            if (f > t.eps) {
                double dot = 0.0;
                for (std::size_t i = 0; i < gn.size(); ++i)
                    dot += gn[i] * pre[i];
                for (std::size_t i = 0; i < gn.size(); ++i)
                    gp[i] = gn[i] / f - dot / (f * f * f) * pre[i];
            } else {
                gp = (1.0 / t.eps) * gn;
            }
        }

        // Gradient biasing: the mask scales the gradient reaching the raw scores.
        Matrix graw = elementwise_mul(applied[h], gp);
        if (use_masks)
            gmask[idx] = elementwise_mul(t.raw_attention[idx], gp);
        gq[idx] = matmul(graw, kh);
        gk[idx] = matmul_tn(graw, qh);
        g.raw_attention[idx] = std::move(graw);
        g.pre_norm[idx] = std::move(gp);
    }

    const std::size_t rows = t.batch * t.seq;
    const std::size_t d = params.d_model();
    Matrix gQ(rows, d), gK(rows, d), gV(rows, d);
    for (std::size_t idx = 0; idx < items; ++idx) {
        const std::size_t b = idx / t.num_heads;
        const std::size_t h = idx % t.num_heads;
        add_block(gQ, gq[idx], b * t.seq, h * dh);
        add_block(gK, gk[idx], b * t.seq, h * dh);
        add_block(gV, gv[idx], b * t.seq, h * dh);
    }

    g.w_queries = matmul_tn(t.input, gQ);
    g.w_keys = matmul_tn(t.input, gK);
    g.w_values = matmul_tn(t.input, gV);
    g.input = matmul_nt(gQ, params.w_queries);
    g.input += matmul_nt(gK, params.w_keys);
    g.input += matmul_nt(gV, params.w_values);

    if (use_masks) {
        const std::size_t n = t.inductive_mask[0].rows();
        std::vector<Matrix> head_mask_grad(params.masks.size(), Matrix(n, n));
        for (std::size_t idx = 0; idx < items; ++idx) {
            const std::size_t h = idx % t.num_heads;
            Matrix &acc = head_mask_grad[params.shared_mask() ? 0 : h];
            const std::size_t off = t.has_cls ? 1 : 0;
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < n; ++c)
                    acc(r, c) += gmask[idx](r + off, c + off);
        }
        for (std::size_t m = 0; m < params.masks.size(); ++m) {
            // mask = unroll(A^T B), so dJ/d(A^T B) = roll(dJ/dmask)
            const Matrix gc = roll_rows(head_mask_grad[m]);
            g.mask_a.push_back(matmul_nt(params.masks[m].b(), gc));
            g.mask_b.push_back(matmul(params.masks[m].a(), gc));
        }
    }
    return g;
}

} // namespace ibit
