#include "ibit/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ibit/errors.hpp"

namespace ibit {

const Matrix &Var::value() const { return tape_->value(id_); }
const Matrix &Var::grad() const { return tape_->grad(id_); }

Var Tape::push(Matrix value, std::vector<std::size_t> parents, BackwardFn backward, bool requires_grad) {
    if (precision_ == Precision::f32)
        for (auto &v : value.values())
            v = static_cast<double>(static_cast<float>(v));
    nodes_.push_back(Node{std::move(value), Matrix{}, std::move(parents), std::move(backward), requires_grad});
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::vector<Var> parents, BackwardFn backward) {
    std::vector<std::size_t> ids;
    ids.reserve(parents.size());
    bool needs = false;
    for (const auto &p : parents) {
        if (&p.tape() != this)
            throw StateError("tape: operand recorded on a different tape");
        ids.push_back(p.id());
        needs = needs || nodes_[p.id()].requires_grad;
    }
    if (!needs)
        return push(std::move(value), {}, nullptr, false);
    return push(std::move(value), std::move(ids), std::move(backward), true);
}

const Matrix &Tape::grad(std::size_t id) const {
    const auto &node = nodes_.at(id);
    if (!backward_done_)
        throw StateError("tape: gradient requested before backward()");
    return node.grad;
}

void Tape::backward(Var loss) {
    auto &root = nodes_.at(loss.id());
    if (root.value.rows() != 1 || root.value.cols() != 1)
        throw DimensionError("tape: backward() needs a 1x1 loss, got " + root.value.shape_string());
    if (backward_done_)
        throw StateError("tape: backward() already ran");
    root.grad = Matrix(1, 1, 1.0);

    std::vector<Matrix> parent_grads;
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
        Node &node = nodes_[id];
        if (!node.requires_grad || !node.backward || node.grad.empty())
            continue;
        parent_grads.assign(node.parents.size(), Matrix{});
        node.backward(node.grad, parent_grads);
        for (std::size_t p = 0; p < node.parents.size(); ++p) {
            Node &parent = nodes_[node.parents[p]];
            if (!parent.requires_grad || parent_grads[p].empty())
                continue;
            if (!parent_grads[p].same_shape(parent.value))
                throw DimensionError("tape: gradient shape " + parent_grads[p].shape_string() +
                                     " does not match value shape " + parent.value.shape_string());
            if (parent.grad.empty())
                parent.grad = std::move(parent_grads[p]);
            else
                parent.grad += parent_grads[p];
        }
    }
    for (auto &node : nodes_)
        if (node.grad.empty())
            node.grad = Matrix(node.value.rows(), node.value.cols());
    backward_done_ = true;
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

namespace ad {

namespace {

double gelu_derivative(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

} // namespace

Var matmul(Var a, Var b) {
    const Matrix &av = a.value();
    const Matrix &bv = b.value();
    return a.tape().record(ibit::matmul(av, bv), {a, b}, [&av, &bv](const Matrix &g, std::vector<Matrix> &out) {
        out[0] = matmul_nt(g, bv);
        out[1] = matmul_tn(av, g);
    });
}

Var matmul_nt(Var a, Var b) {
    const Matrix &av = a.value();
    const Matrix &bv = b.value();
    return a.tape().record(ibit::matmul_nt(av, bv), {a, b}, [&av, &bv](const Matrix &g, std::vector<Matrix> &out) {
        out[0] = ibit::matmul(g, bv);
        out[1] = matmul_tn(g, av);
    });
}

Var matmul_tn(Var a, Var b) {
    const Matrix &av = a.value();
    const Matrix &bv = b.value();
    return a.tape().record(ibit::matmul_tn(av, bv), {a, b}, [&av, &bv](const Matrix &g, std::vector<Matrix> &out) {
        out[0] = ibit::matmul_nt(bv, g);
        out[1] = ibit::matmul(av, g);
    });
}

Var add(Var a, Var b) {
    return a.tape().record(a.value() + b.value(), {a, b}, [](const Matrix &g, std::vector<Matrix> &out) {
        out[0] = g;
        out[1] = g;
    });
}

Var sub(Var a, Var b) {
    return a.tape().record(a.value() - b.value(), {a, b}, [](const Matrix &g, std::vector<Matrix> &out) {
        out[0] = g;
        out[1] = -1.0 * g;
    });
}

Var hadamard(Var a, Var b) {
    const Matrix &av = a.value();
    const Matrix &bv = b.value();
    return a.tape().record(elementwise_mul(av, bv), {a, b}, [&av, &bv](const Matrix &g, std::vector<Matrix> &out) {
        out[0] = elementwise_mul(g, bv);
        out[1] = elementwise_mul(g, av);
    });
}

Var scale(Var a, double s) {
    return a.tape().record(s * a.value(), {a}, [s](const Matrix &g, std::vector<Matrix> &out) { out[0] = s * g; });
}

Var add_row_bias(Var x, Var bias) {
    const Matrix &xv = x.value();
    const Matrix &bv = bias.value();
    if (bv.rows() != 1 || bv.cols() != xv.cols())
        throw DimensionError("add_row_bias: bias " + bv.shape_string() + " does not fit " + xv.shape_string());
    Matrix y = xv;
    for (std::size_t r = 0; r < y.rows(); ++r)
        for (std::size_t c = 0; c < y.cols(); ++c)
            y(r, c) += bv[c];
    return x.tape().record(std::move(y), {x, bias}, [](const Matrix &g, std::vector<Matrix> &out) {
        Matrix gb(1, g.cols());
        for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c)
                gb[c] += g(r, c);
        out[0] = g;
        out[1] = std::move(gb);
    });
}

Var scale_row_groups(Var x, std::vector<double> factors, std::size_t rows_per_group) {
    const Matrix &xv = x.value();
    if (rows_per_group == 0 || factors.size() * rows_per_group != xv.rows())
        throw DimensionError("scale_row_groups: factor count does not match " + xv.shape_string());
    auto apply = [rows_per_group](const Matrix &m, const std::vector<double> &f) {
        Matrix y = m;
        for (std::size_t r = 0; r < y.rows(); ++r)
            for (auto &v : y.row(r))
                v *= f[r / rows_per_group];
        return y;
    };
    Matrix y = apply(xv, factors);
    return x.tape().record(std::move(y), {x},
                           [apply, factors = std::move(factors)](const Matrix &g, std::vector<Matrix> &out) {
                               out[0] = apply(g, factors);
                           });
}

Var gelu(Var x) {
    const Matrix &xv = x.value();
    Matrix y(xv.rows(), xv.cols());
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = gelu_value(xv[i]);
    return x.tape().record(std::move(y), {x}, [&xv](const Matrix &g, std::vector<Matrix> &out) {
        Matrix gx(g.rows(), g.cols());
        for (std::size_t i = 0; i < gx.size(); ++i)
            gx[i] = g[i] * gelu_derivative(xv[i]);
        out[0] = std::move(gx);
    });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    const Matrix &xv = x.value();
    const Matrix &gv = gamma.value();
    const Matrix &bv = beta.value();
    const std::size_t n = xv.rows();
    const std::size_t d = xv.cols();
    if (gv.rows() != 1 || gv.cols() != d || !gv.same_shape(bv))
        throw DimensionError("layer_norm: gamma/beta " + gv.shape_string() + " do not fit " + xv.shape_string());

    Matrix xhat(n, d);
    std::vector<double> inv_std(n);
    Matrix y(n, d);
    for (std::size_t r = 0; r < n; ++r) {
        const auto row = xv.row(r);
        double mean = 0.0;
        for (double v : row)
            mean += v;
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (double v : row)
            var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < d; ++c) {
            xhat(r, c) = (row[c] - mean) * inv_std[r];
            y(r, c) = xhat(r, c) * gv[c] + bv[c];
        }
    }
    return x.tape().record(
        std::move(y), {x, gamma, beta},
        [xhat = std::move(xhat), inv_std = std::move(inv_std), &gv](const Matrix &g, std::vector<Matrix> &out) {
            const std::size_t n = g.rows();
            const std::size_t d = g.cols();
            Matrix gx(n, d);
            Matrix ggamma(1, d);
            Matrix gbeta(1, d);
            std::vector<double> gxhat(d);
            for (std::size_t r = 0; r < n; ++r) {
                double mean_g = 0.0;
                double mean_gx = 0.0;
                for (std::size_t c = 0; c < d; ++c) {
                    ggamma[c] += g(r, c) * xhat(r, c);
                    gbeta[c] += g(r, c);
                    gxhat[c] = g(r, c) * gv[c];
                    mean_g += gxhat[c];
                    mean_gx += gxhat[c] * xhat(r, c);
                }
                mean_g /= static_cast<double>(d);
                mean_gx /= static_cast<double>(d);
                for (std::size_t c = 0; c < d; ++c)
                    gx(r, c) = inv_std[r] * (gxhat[c] - mean_g - xhat(r, c) * mean_gx);
            }
            out[0] = std::move(gx);
            out[1] = std::move(ggamma);
            out[2] = std::move(gbeta);
        });
}

Var gather_rows(Var x, std::vector<std::size_t> rows) {
    const Matrix &xv = x.value();
    Matrix y(rows.size(), xv.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= xv.rows())
            throw IndexError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " +
                             xv.shape_string());
        std::copy(xv.row(rows[i]).begin(), xv.row(rows[i]).end(), y.row(i).begin());
    }
    const std::size_t src_rows = xv.rows();
    return x.tape().record(std::move(y), {x},
                           [rows = std::move(rows), src_rows](const Matrix &g, std::vector<Matrix> &out) {
                               Matrix gx(src_rows, g.cols());
                               for (std::size_t i = 0; i < rows.size(); ++i)
                                   for (std::size_t c = 0; c < g.cols(); ++c)
                                       gx(rows[i], c) += g(i, c);
                               out[0] = std::move(gx);
                           });
}

Var sum(Var x) {
    const Matrix &xv = x.value();
    return x.tape().record(Matrix(1, 1, xv.sum()), {x}, [r = xv.rows(), c = xv.cols()](const Matrix &g,
                                                                                        std::vector<Matrix> &out) {
        out[0] = Matrix(r, c, g[0]);
    });
}

Var mse(Var x, const Matrix &target) {
    const Matrix &xv = x.value();
    require_same_shape(xv, target, "mse");
    return x.tape().record(Matrix(1, 1, mean_squared_error(xv, target)), {x},
                           [&xv, target](const Matrix &g, std::vector<Matrix> &out) {
                               Matrix gx = xv - target;
                               gx *= 2.0 * g[0] / static_cast<double>(gx.size());
                               out[0] = std::move(gx);
                           });
}

Var cross_entropy(Var logits, std::span<const int> labels, double smoothing) {
    const Matrix &z = logits.value();
    const std::size_t n = z.rows();
    const std::size_t k = z.cols();
    if (labels.size() != n)
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                             z.shape_string());
    Matrix probs(n, k);
    Matrix target(n, k, smoothing / static_cast<double>(k));
    double loss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k)
            throw IndexError("cross_entropy: label " + std::to_string(labels[r]) + " out of range");
        target(r, static_cast<std::size_t>(labels[r])) += 1.0 - smoothing;
        const auto row = z.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double denom = 0.0;
        for (double v : row)
            denom += std::exp(v - mx);
        const double log_denom = std::log(denom) + mx;
        for (std::size_t c = 0; c < k; ++c) {
            probs(r, c) = std::exp(row[c] - log_denom);
            loss -= target(r, c) * (row[c] - log_denom);
        }
    }
    loss /= static_cast<double>(n);
    return logits.tape().record(Matrix(1, 1, loss), {logits},
                                [probs = std::move(probs), target = std::move(target)](const Matrix &g,
                                                                                       std::vector<Matrix> &out) {
                                    Matrix gz = probs - target;
                                    gz *= g[0] / static_cast<double>(gz.rows());
                                    out[0] = std::move(gz);
                                });
}

} // namespace ad
} // namespace ibit
