#ifndef IBIT_TESTS_GRADCHECK_HPP_
#define IBIT_TESTS_GRADCHECK_HPP_

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "ibit/linalg.hpp"
#include "ibit/lmsa.hpp"
#include "ibit/model.hpp"
#include "ibit/tape.hpp"

namespace ibit::testing {

struct GradReport {
    std::string worst_name;
    double worst_rel = 0.0;
};

inline void note(GradReport &r, const std::string &name, const Matrix &analytic, const Matrix &numeric) {
    const double e = max_rel_diff(analytic, numeric, 1e-6);
    if (e >= r.worst_rel) {
        r.worst_rel = e;
        r.worst_name = name;
    }
}

// Small LMSA instance: 2x2 grid plus CLS (5 tokens), d_model 4, 2 heads.
struct LmsaFixture {
    GridGeometry geom{2, 2};
    std::size_t batch = 2;
    LMSAParams params;
    Matrix x;
    Matrix upstream; // J = sum(output .* upstream)

    explicit LmsaFixture(std::uint64_t seed, std::size_t d_model = 4, std::size_t heads = 2) {
        std::mt19937_64 rng(seed);
        params.num_heads = heads;
        params.w_queries = Matrix::uniform(d_model, d_model, -1, 1, rng);
        params.w_keys = Matrix::uniform(d_model, d_model, -1, 1, rng);
        params.w_values = Matrix::uniform(d_model, d_model, -1, 1, rng);
        for (std::size_t h = 0; h < heads; ++h)
            params.masks.push_back(SubMaskPair::random(2, geom.seq_len(), rng));
        x = Matrix::uniform(batch * (geom.seq_len() + 1), d_model, -1, 1, rng);
        upstream = Matrix::uniform(x.rows(), d_model, -1, 1, rng);
    }

    double objective(const LMSAParams &p, const Matrix &input) const {
        const Matrix out = lmsa_forward(input, batch, p, geom).output;
        double s = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i)
            s += out[i] * upstream[i];
        return s;
    }
};

// Largest relative error between lmsa_backward and central differences over
// every input and parameter entry.
inline GradReport check_lmsa_gradients(const LmsaFixture &fx, double eps = 1e-5) {
    const LMSAResult res = lmsa_forward(fx.x, fx.batch, fx.params, fx.geom);
    const LMSAGradients g = lmsa_backward(res.trace, fx.params, fx.upstream);
    GradReport rep;

    note(rep, "input", g.input,
         finite_diff_grad([&](const Matrix &m) { return fx.objective(fx.params, m); }, fx.x, eps));
    auto weight = [&](const char *name, Matrix LMSAParams::*field, const Matrix &analytic) {
        note(rep, name, analytic,
             finite_diff_grad(
                 [&](const Matrix &m) {
                     LMSAParams p = fx.params;
                     p.*field = m;
                     return fx.objective(p, fx.x);
                 },
                 fx.params.*field, eps));
    };
    weight("w_queries", &LMSAParams::w_queries, g.w_queries);
    weight("w_keys", &LMSAParams::w_keys, g.w_keys);
    weight("w_values", &LMSAParams::w_values, g.w_values);
    for (std::size_t m = 0; m < fx.params.masks.size(); ++m) {
        const auto &pair = fx.params.masks[m];
        note(rep, "mask" + std::to_string(m) + ".a", g.mask_a[m],
             finite_diff_grad(
                 [&](const Matrix &a) {
                     LMSAParams p = fx.params;
                     p.masks[m] = SubMaskPair(a, pair.b());
                     return fx.objective(p, fx.x);
                 },
                 pair.a(), eps));
        note(rep, "mask" + std::to_string(m) + ".b", g.mask_b[m],
             finite_diff_grad(
                 [&](const Matrix &b) {
                     LMSAParams p = fx.params;
                     p.masks[m] = SubMaskPair(pair.a(), b);
                     return fx.objective(p, fx.x);
                 },
                 pair.b(), eps));
    }
    return rep;
}

// A model small enough for entry-by-entry finite differences: 4x4 images in
// 2x2 patches give a 2x2 grid and 5 tokens.
inline TrainConfig tiny_gradcheck_config(std::uint64_t seed) {
    TrainConfig c;
    c.layers = 2;
    c.heads = 2;
    c.d_model = 4;
    c.mlp_ratio = 2;
    c.patch_size = 2;
    c.mask_filter = 2;
    c.mask_sigma = 1.0;
    c.mask_epochs = 50;
    c.seed = seed;
    return c;
}

struct ModelGradFixture {
    Model model;
    std::vector<Matrix> images;
    std::vector<int> labels;

    ModelGradFixture(std::uint64_t seed, Variant variant) {
        model = build_model(tiny_gradcheck_config(seed), variant, 4, 4, 3);
        std::mt19937_64 rng(seed + 17);
        // Larger weights than the default init so every path carries signal.
        for (auto &[name, value] : model.params)
            if (name.find(".mask") == std::string::npos)
                value = Matrix::uniform(value.rows(), value.cols(), -0.8, 0.8, rng);
        for (int i = 0; i < 3; ++i) {
            images.push_back(Matrix::uniform(4, 4, 0.0, 1.0, rng));
            labels.push_back(i);
        }
    }

    double loss(const Model &m) const {
        Tape tape;
        ForwardPass fp = model_forward(tape, m, images);
        return ad::cross_entropy(fp.logits, labels, m.config.label_smoothing).value()[0];
    }
};

inline GradReport check_model_gradients(const ModelGradFixture &fx, double eps = 1e-5) {
    Tape tape;
    ForwardOptions fo;
    fo.params_require_grad = true;
    ForwardPass fp = model_forward(tape, fx.model, fx.images, fo);
    Var loss = ad::cross_entropy(fp.logits, fx.labels, fx.model.config.label_smoothing);
    tape.backward(loss);

    GradReport rep;
    std::size_t i = 0;
    for (const auto &[name, value] : fx.model.params) {
        const Matrix analytic = fp.param_vars[i++].grad();
        const Matrix numeric = finite_diff_grad(
            [&, pname = name](const Matrix &m) {
                Model copy = fx.model;
                copy.params.at(pname) = m;
                return fx.loss(copy);
            },
            value, eps);
        note(rep, name, analytic, numeric);
    }
    return rep;
}

} // namespace ibit::testing

#endif // IBIT_TESTS_GRADCHECK_HPP_
