#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "helpers.hpp"
#include "ibit/errors.hpp"
#include "ibit/lmsa.hpp"

using namespace ibit;
using ibit::testing::LmsaFixture;
using ibit::testing::random_matrix;

namespace {

// 1x2 grid, no CLS, one head of width 2, fidelity-1 mask A=[1 2], B=[1 3].
struct Golden {
    GridGeometry geom{1, 2};
    Matrix x{{1, 0}, {2, -1}};
    LMSAParams params;
    Golden() {
        params.num_heads = 1;
        params.w_queries = Matrix{{1, 1}, {0, 1}};
        params.w_keys = Matrix{{1, 0}, {1, 1}};
        params.w_values = Matrix{{2, 0}, {1, 1}};
        params.masks.emplace_back(Matrix{{1, 2}}, Matrix{{1, 3}});
    }
};

LMSAParams ones_mask_params(const LMSAParams &p, std::size_t seq_len) {
    LMSAParams q = p;
    q.masks.clear();
    Matrix a(1, seq_len, 1.0);
    q.masks.emplace_back(a, a);
    return q;
}

} // namespace

TEST_CASE("hand-evaluated two-token layer") {
    const Golden g;
    const LMSAResult r = lmsa_forward(g.x, 1, g.params, g.geom);
    CHECK(r.trace.raw_attention[0] == Matrix{{1, 0}, {2, 1}});
    CHECK(r.trace.inductive_mask[0] == Matrix{{1, 3}, {6, 2}});
    CHECK(r.trace.pre_norm[0] == Matrix{{1, 0}, {12, 2}});
    const Matrix expected{{2, 0}, {15.0 / 7.0, -1.0 / 7.0}};
    CHECK(max_abs_diff(r.output, expected) <= 1e-15);

    const Matrix base = baseline_attention_forward(g.x, 1, g.params, g.geom).output;
    CHECK(max_abs_diff(base, Matrix{{2, 0}, {7.0 / 3.0, -1.0 / 3.0}}) <= 1e-15);
}

TEST_CASE("ones mask reduces to the baseline layer") {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const LmsaFixture fx(s, 6, 3);
        const LMSAParams ones = ones_mask_params(fx.params, fx.geom.seq_len());
        const Matrix a = lmsa_forward(fx.x, fx.batch, ones, fx.geom).output;
        const Matrix b = baseline_attention_forward(fx.x, fx.batch, fx.params, fx.geom).output;
        CHECK(max_abs_diff(a, b) <= 1e-10);
    }
}

TEST_CASE("positive rescaling of the queries leaves the output unchanged") {
    for (std::uint64_t s = 0; s < 10; ++s) {
        const LmsaFixture fx(100 + s);
        const Matrix ref = lmsa_forward(fx.x, fx.batch, fx.params, fx.geom).output;
        for (double c : {0.1, 10.0, 3.7}) {
            LMSAParams p = fx.params;
            p.w_queries = c * p.w_queries;
            CHECK(max_abs_diff(lmsa_forward(fx.x, fx.batch, p, fx.geom).output, ref) <= 1e-10);
        }
    }
}

TEST_CASE("frobenius normalization is also scale invariant") {
    const LmsaFixture fx(7);
    LMSAOptions o;
    o.norm = AttentionNorm::frobenius;
    const Matrix ref = lmsa_forward(fx.x, fx.batch, fx.params, fx.geom, o).output;
    LMSAParams p = fx.params;
    p.w_keys = 5.0 * p.w_keys;
    CHECK(max_abs_diff(lmsa_forward(fx.x, fx.batch, p, fx.geom, o).output, ref) <= 1e-10);
    CHECK(max_abs_diff(ref, lmsa_forward(fx.x, fx.batch, fx.params, fx.geom).output) > 1e-6);
}

TEST_CASE("zero input stays finite and denominators respect eps") {
    const LmsaFixture fx(8);
    const Matrix zeros(fx.x.rows(), fx.x.cols());
    const LMSAResult r = lmsa_forward(zeros, fx.batch, fx.params, fx.geom);
    CHECK(r.output.all_finite());
    CHECK(r.output == zeros);
    for (const auto &m : r.trace.masked_attention)
        CHECK(m.all_finite());
}

TEST_CASE("shape contract") {
    std::mt19937_64 rng(9);
    for (auto [h, w, heads, d, batch, cls] :
         {std::tuple{2, 2, 1, 3, 1, false}, {3, 2, 2, 4, 3, true}, {2, 3, 3, 6, 2, true}}) {
        const GridGeometry g(h, w);
        LMSAParams p;
        p.num_heads = heads;
        p.w_queries = random_matrix(d, d, rng);
        p.w_keys = random_matrix(d, d, rng);
        p.w_values = random_matrix(d, d, rng);
        p.masks.push_back(SubMaskPair::random(2, g.seq_len(), rng));
        const std::size_t seq = g.seq_len() + (cls ? 1 : 0);
        const Matrix x = random_matrix(batch * seq, d, rng);
        const LMSAResult r = lmsa_forward(x, batch, p, g);
        CHECK(r.output.same_shape(x));
        CHECK(r.trace.has_cls == cls);
        CHECK(r.trace.raw_attention.size() == static_cast<std::size_t>(batch * heads));
        CHECK(r.trace.inductive_mask.size() == static_cast<std::size_t>(heads));
        CHECK(r.trace.inductive_mask[0].rows() == g.seq_len());
    }
}

TEST_CASE("inconsistent shapes are rejected") {
    const LmsaFixture fx(10);
    CHECK_THROWS_AS(lmsa_forward(Matrix(7, 4), 1, fx.params, fx.geom), DimensionError);
    CHECK_THROWS_AS(lmsa_forward(Matrix(10, 3), 2, fx.params, fx.geom), DimensionError);
    CHECK_THROWS_AS(lmsa_forward(fx.x, 3, fx.params, fx.geom), DimensionError);
    LMSAParams odd = fx.params;
    odd.num_heads = 3;
    CHECK_THROWS(lmsa_forward(fx.x, fx.batch, odd, fx.geom));
    LMSAParams wrong_mask = fx.params;
    std::mt19937_64 rng(1);
    wrong_mask.masks[0] = SubMaskPair::random(2, 9, rng);
    CHECK_THROWS_AS(lmsa_forward(fx.x, fx.batch, wrong_mask, fx.geom), DimensionError);
    CHECK_THROWS_AS(lmsa_backward(AttentionTrace{}, fx.params, fx.upstream), StateError);
}

TEST_CASE("shared mask broadcasts one pair over heads") {
    LmsaFixture fx(11);
    fx.params.masks.erase(fx.params.masks.begin() + 1, fx.params.masks.end());
    const LMSAResult r = lmsa_forward(fx.x, fx.batch, fx.params, fx.geom);
    CHECK(r.trace.inductive_mask[0] == r.trace.inductive_mask[1]);
    const LMSAGradients g = lmsa_backward(r.trace, fx.params, fx.upstream);
    CHECK(g.mask_a.size() == 1);
    CHECK(ibit::testing::check_lmsa_gradients(fx).worst_rel <= 1e-4);
}

TEST_CASE("token permutation equivariance of the baseline layer") {
    std::mt19937_64 rng(12);
    const LmsaFixture fx(12);
    const std::size_t seq = fx.geom.seq_len() + 1;
    std::vector<std::size_t> perm(seq);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const Matrix x = fx.x;
    Matrix xp = x;
    for (std::size_t b = 0; b < fx.batch; ++b)
        for (std::size_t t = 0; t < seq; ++t)
            for (std::size_t c = 0; c < x.cols(); ++c)
                xp(b * seq + t, c) = x(b * seq + perm[t], c);
    const Matrix y = baseline_attention_forward(x, fx.batch, fx.params, fx.geom).output;
    const Matrix yp = baseline_attention_forward(xp, fx.batch, fx.params, fx.geom).output;
    for (std::size_t b = 0; b < fx.batch; ++b)
        for (std::size_t t = 0; t < seq; ++t)
            for (std::size_t c = 0; c < x.cols(); ++c)
                CHECK(yp(b * seq + t, c) == doctest::Approx(y(b * seq + perm[t], c)).epsilon(1e-12));
}

TEST_CASE("backward matches finite differences") {
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto rep = ibit::testing::check_lmsa_gradients(LmsaFixture(200 + s));
        INFO(rep.worst_name);
        CHECK(rep.worst_rel <= 1e-4);
    }
}

TEST_CASE("zero upstream gradient gives zero gradients") {
    const LmsaFixture fx(13);
    const LMSAResult r = lmsa_forward(fx.x, fx.batch, fx.params, fx.geom);
    const Matrix zero(fx.upstream.rows(), fx.upstream.cols());
    const LMSAGradients g = lmsa_backward(r.trace, fx.params, zero);
    CHECK(g.input == Matrix(fx.x.rows(), fx.x.cols()));
    CHECK(g.w_queries == Matrix(4, 4));
    CHECK(g.w_keys == Matrix(4, 4));
    CHECK(g.w_values == Matrix(4, 4));
    for (const auto &m : g.mask_a)
        CHECK(m == Matrix(m.rows(), m.cols()));
}

TEST_CASE("gradient biasing identity") {
    for (std::uint64_t s = 0; s < 10; ++s) {
        const LmsaFixture fx(300 + s);
        const LMSAResult r = lmsa_forward(fx.x, fx.batch, fx.params, fx.geom);
        const LMSAGradients g = lmsa_backward(r.trace, fx.params, fx.upstream);
        for (std::size_t b = 0; b < fx.batch; ++b)
            for (std::size_t h = 0; h < fx.params.num_heads; ++h) {
                const std::size_t i = r.trace.index(b, h);
                const Matrix expected = elementwise_mul(r.trace.applied_mask(h), g.pre_norm[i]);
                CHECK(max_abs_diff(g.raw_attention[i], expected) <= 1e-12);
            }
    }
}
