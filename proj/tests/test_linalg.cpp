#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "ibit/errors.hpp"
#include "ibit/kernels.hpp"
#include "ibit/linalg.hpp"
#include "ibit/matrix.hpp"
#include "ibit/tape.hpp"

using namespace ibit;
using ibit::testing::random_matrix;

TEST_CASE("matrix construction rejects bad data") {
    CHECK_THROWS_AS(Matrix(2, 2, std::vector<double>{1, 2, 3}), DimensionError);
    CHECK_THROWS_AS(Matrix(1, 2, std::vector<double>{1, std::numeric_limits<double>::quiet_NaN()}), std::invalid_argument);
    CHECK_THROWS_AS(Matrix(1, 1, std::vector<double>{std::numeric_limits<double>::infinity()}), std::invalid_argument);
    CHECK_THROWS(Matrix({{1, 2}, {3}}));
    const Matrix m{{1, 2, 3}, {4, 5, 6}};
    CHECK(m.rows() == 2);
    CHECK(m.cols() == 3);
    CHECK(m(1, 2) == 6);
    CHECK(m.size() == 6);
}

TEST_CASE("matmul examples") {
    std::mt19937_64 rng(1);
    const Matrix m = random_matrix(2, 2, rng);
    CHECK(matmul(Matrix::identity(2), m) == m);
    CHECK(matmul(Matrix{{1, 2}, {3, 4}}, Matrix{{1}, {1}}) == Matrix{{3}, {7}});

    const Matrix a = random_matrix(9, 49, rng);
    const Matrix b = random_matrix(9, 49, rng);
    const Matrix p = matmul_tn(a, b);
    CHECK(p.rows() == 49);
    CHECK(p.cols() == 49);
    CHECK(max_abs_diff(p, matmul(a.transposed(), b)) == 0.0);
    CHECK(max_abs_diff(matmul_nt(a.transposed(), b.transposed()), p) < 1e-14);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    try {
        (void)matmul(Matrix(2, 3), Matrix(2, 3));
        FAIL("expected DimensionError");
    } catch (const DimensionError &e) {
        const std::string what = e.what();
        CHECK(what.find("2x3") != std::string::npos);
    }
    CHECK_THROWS_AS(matmul_tn(Matrix(2, 3), Matrix(3, 2)), DimensionError);
    CHECK_THROWS_AS(matmul_nt(Matrix(2, 3), Matrix(2, 2)), DimensionError);
}

TEST_CASE("elementwise product examples") {
    std::mt19937_64 rng(2);
    const Matrix a = random_matrix(3, 4, rng);
    CHECK(elementwise_mul(a, Matrix::ones(3, 4)) == a);
    CHECK(elementwise_mul(a, Matrix(3, 4)) == Matrix(3, 4));
    CHECK(elementwise_mul(Matrix{{1, 2}, {3, 4}}, Matrix{{2, 0}, {0, 2}}) == Matrix{{2, 0}, {0, 8}});
    CHECK_THROWS_AS(elementwise_mul(Matrix(2, 2), Matrix(2, 3)), DimensionError);
}

TEST_CASE("matmul is associative on random chains") {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 20; ++t) {
        std::uniform_int_distribution<std::size_t> dim(1, 12);
        const std::size_t m = dim(rng), k = dim(rng), l = dim(rng), n = dim(rng);
        const Matrix a = random_matrix(m, k, rng);
        const Matrix b = random_matrix(k, l, rng);
        const Matrix c = random_matrix(l, n, rng);
        CHECK(max_rel_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), 1.0) < 1e-10);
    }
}

TEST_CASE("parallel kernels match the serial reference bitwise") {
    std::mt19937_64 rng(4);
    for (auto [m, k, n] : {std::tuple{1, 1, 1}, {7, 5, 3}, {50, 96, 96}, {130, 33, 65}, {1600, 96, 8}}) {
        const Matrix a = random_matrix(m, k, rng);
        const Matrix b = random_matrix(k, n, rng);
        const Matrix bt = b.transposed();
        const Matrix at = a.transposed();
        Matrix s(m, n), p(m, n);
        kernels::serial::gemm_nn(a.data(), b.data(), s.data(), m, k, n);
        kernels::parallel::gemm_nn(a.data(), b.data(), p.data(), m, k, n);
        CHECK(s == p);
        kernels::serial::gemm_nt(a.data(), bt.data(), s.data(), m, k, n);
        kernels::parallel::gemm_nt(a.data(), bt.data(), p.data(), m, k, n);
        CHECK(s == p);
        kernels::serial::gemm_tn(at.data(), b.data(), s.data(), m, k, n);
        kernels::parallel::gemm_tn(at.data(), b.data(), p.data(), m, k, n);
        CHECK(s == p);
        Matrix hs(m, k), hp(m, k);
        kernels::serial::hadamard(a.data(), a.data(), hs.data(), a.size());
        kernels::parallel::hadamard(a.data(), a.data(), hp.data(), a.size());
        CHECK(hs == hp);
    }
}

TEST_CASE("numerical rank examples") {
    CHECK(numerical_rank(Matrix::identity(5)) == 5);
    const Matrix u{{1}, {2}, {-3}};
    const Matrix v{{4}, {0.5}, {2}, {1}};
    CHECK(numerical_rank(matmul_nt(u, v)) == 1);
    CHECK(numerical_rank(Matrix(3, 3)) == 0);
    CHECK_THROWS_AS(numerical_rank(Matrix()), DimensionError);
    CHECK_THROWS_AS(numerical_rank(Matrix::identity(2), 0.0), ConfigError);
}

TEST_CASE("numerical rank ignores row order and scale") {
    std::mt19937_64 rng(5);
    for (std::size_t r = 1; r <= 6; ++r) {
        const Matrix m = matmul(random_matrix(8, r, rng), random_matrix(r, 8, rng));
        const std::size_t rank = numerical_rank(m);
        CHECK(rank == r);
        Matrix perm = m;
        std::vector<std::size_t> order(8);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t i = 0; i < 8; ++i)
            for (std::size_t j = 0; j < 8; ++j)
                perm(i, j) = m(order[i], j);
        CHECK(numerical_rank(perm) == rank);
        CHECK(numerical_rank(-3.5 * m) == rank);
        CHECK(numerical_rank(1e-6 * m) == rank);
    }
}

TEST_CASE("finite differences") {
    std::mt19937_64 rng(6);
    const Matrix x = random_matrix(3, 4, rng);
    const Matrix g_sum = finite_diff_grad([](const Matrix &m) { return m.sum(); }, x);
    CHECK(max_abs_diff(g_sum, Matrix::ones(3, 4)) < 1e-9);

    const Matrix g_sq = finite_diff_grad(
        [](const Matrix &m) {
            double s = 0;
            for (double v : m.values())
                s += 0.5 * v * v;
            return s;
        },
        x);
    CHECK(max_abs_diff(g_sq, x) < 1e-8);

    CHECK_THROWS_AS(finite_diff_grad([](const Matrix &) { return std::nan(""); }, x), TrainingError);
    CHECK_THROWS_AS(finite_diff_grad([](const Matrix &m) { return m.sum(); }, x, 0.0), ConfigError);
}

TEST_CASE("tape gradient of MSE of a low-rank product matches finite differences") {
    std::mt19937_64 rng(7);
    const Matrix a = random_matrix(3, 6, rng);
    const Matrix b = random_matrix(3, 6, rng);
    const Matrix target = random_matrix(6, 6, rng);
    Tape tape;
    Var va = tape.parameter(a);
    Var vb = tape.parameter(b);
    Var loss = ad::mse(ad::matmul_tn(va, vb), target);
    tape.backward(loss);
    const Matrix numeric = finite_diff_grad(
        [&](const Matrix &m) { return mean_squared_error(matmul_tn(m, b), target); }, a);
    CHECK(max_rel_diff(va.grad(), numeric, 1e-8) <= 1e-5);
}

namespace {

// Applies `op` to fresh parameters and compares tape gradients with finite
// differences of sum(op(...) .* weights).
template <class Op>
double tape_vs_fd(std::vector<Matrix> inputs, Op op, std::mt19937_64 &rng) {
    Matrix weights;
    auto objective = [&](const std::vector<Matrix> &in) {
        Tape t;
        std::vector<Var> vars;
        for (const auto &m : in)
            vars.push_back(t.constant(m));
        const Matrix out = op(vars).value();
        if (weights.empty())
            weights = random_matrix(out.rows(), out.cols(), rng);
        double s = 0;
        for (std::size_t i = 0; i < out.size(); ++i)
            s += out[i] * weights[i];
        return s;
    };
    objective(inputs);

    Tape tape;
    std::vector<Var> vars;
    for (const auto &m : inputs)
        vars.push_back(tape.parameter(m));
    Var out = op(vars);
    Var loss = ad::sum(ad::hadamard(out, tape.constant(weights)));
    tape.backward(loss);

    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Matrix numeric = finite_diff_grad(
            [&](const Matrix &m) {
                auto in = inputs;
                in[i] = m;
                return objective(in);
            },
            inputs[i]);
        worst = std::max(worst, max_rel_diff(vars[i].grad(), numeric, 1e-6));
    }
    return worst;
}

} // namespace

TEST_CASE("every tape primitive matches finite differences") {
    std::mt19937_64 rng(8);
    using V = std::vector<Var>;
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t m = 2 + trial % 3, k = 3, n = 2 + trial % 2;
        auto r = [&](std::size_t rows, std::size_t cols) { return random_matrix(rows, cols, rng); };
        CHECK(tape_vs_fd({r(m, k), r(k, n)}, [](const V &v) { return ad::matmul(v[0], v[1]); }, rng) <= 1e-4);
        CHECK(tape_vs_fd({r(m, k), r(n, k)}, [](const V &v) { return ad::matmul_nt(v[0], v[1]); }, rng) <= 1e-4);
        CHECK(tape_vs_fd({r(k, m), r(k, n)}, [](const V &v) { return ad::matmul_tn(v[0], v[1]); }, rng) <= 1e-4);
        CHECK(tape_vs_fd({r(m, n), r(m, n)}, [](const V &v) { return ad::add(v[0], v[1]); }, rng) <= 1e-4);
        CHECK(tape_vs_fd({r(m, n), r(m, n)}, [](const V &v) { return ad::sub(v[0], v[1]); }, rng) <= 1e-4);
        CHECK(tape_vs_fd({r(m, n), r(m, n)}, [](const V &v) { return ad::hadamard(v[0], v[1]); }, rng) <= 1e-4);
        CHECK(tape_vs_fd({r(m, n)}, [](const V &v) { return ad::scale(v[0], -2.5); }, rng) <= 1e-4);
        CHECK(tape_vs_fd({r(m, n), r(1, n)}, [](const V &v) { return ad::add_row_bias(v[0], v[1]); }, rng) <= 1e-4);
        CHECK(tape_vs_fd({r(4, n)}, [](const V &v) { return ad::scale_row_groups(v[0], {0.0, 2.0}, 2); }, rng) <=
              1e-4);
        CHECK(tape_vs_fd({r(m, n)}, [](const V &v) { return ad::gelu(v[0]); }, rng) <= 1e-4);
        CHECK(tape_vs_fd({r(m, 5), r(1, 5), r(1, 5)},
                         [](const V &v) { return ad::layer_norm(v[0], v[1], v[2]); }, rng) <= 1e-4);
        CHECK(tape_vs_fd({r(m, n)}, [](const V &v) { return ad::gather_rows(v[0], {1, 0, 1}); }, rng) <= 1e-4);
        CHECK(tape_vs_fd({r(m, n)}, [](const V &v) { return ad::sum(v[0]); }, rng) <= 1e-4);
        const Matrix target = r(m, n);
        CHECK(tape_vs_fd({r(m, n)}, [&](const V &v) { return ad::mse(v[0], target); }, rng) <= 1e-4);
        std::vector<int> labels(m);
        for (std::size_t i = 0; i < m; ++i)
            labels[i] = static_cast<int>(i % n);
        CHECK(tape_vs_fd({r(m, n)}, [&](const V &v) { return ad::cross_entropy(v[0], labels, 0.1); }, rng) <= 1e-4);
    }
}

TEST_CASE("tape gradients have parameter shapes and replay bit-identically") {
    std::mt19937_64 rng(9);
    const Matrix x = random_matrix(4, 3, rng);
    const Matrix w = random_matrix(3, 2, rng);
    auto run = [&] {
        Tape tape;
        Var vx = tape.constant(x);
        Var vw = tape.parameter(w);
        Var loss = ad::sum(ad::gelu(ad::matmul(vx, vw)));
        tape.backward(loss);
        CHECK(vw.grad().same_shape(w));
        return std::pair{loss.value()[0], vw.grad()};
    };
    const auto first = run();
    const auto second = run();
    CHECK(first.first == second.first);
    CHECK(first.second == second.second);
}

TEST_CASE("tape misuse") {
    Tape tape;
    Var a = tape.parameter(Matrix(2, 2, 1.0));
    CHECK_THROWS_AS(a.grad(), StateError);
    CHECK_THROWS_AS(tape.backward(a), DimensionError);
    Var s = ad::sum(a);
    tape.backward(s);
    CHECK(a.grad() == Matrix::ones(2, 2));
    CHECK_THROWS_AS(tape.backward(s), StateError);

    Tape other;
    Var b = other.parameter(Matrix(2, 2));
    CHECK_THROWS(ad::add(a, b));
}

TEST_CASE("f32 tape rounds stored values") {
    Tape tape(Precision::f32);
    Var a = tape.constant(Matrix{{0.1}});
    CHECK(a.value()[0] == static_cast<double>(0.1f));
    CHECK(a.value()[0] != 0.1);
}
