#include "ibit/mask.hpp"

#include <cmath>
#include <fstream>

#include "ibit/binio.hpp"
#include "ibit/errors.hpp"
#include "ibit/tape.hpp"

namespace ibit {

namespace {

void require_square(const Matrix &m, const char *op) {
    if (m.rows() != m.cols())
        throw DimensionError(std::string(op) + ": expected a square matrix, got " + m.shape_string());
}

} // namespace

Matrix roll_rows(const Matrix &m) {
    require_square(m, "roll_rows");
    const std::size_t n = m.rows();
    Matrix out(n, n);
    for (std::size_t q = 0; q < n; ++q)
        for (std::size_t c = 0; c < n; ++c)
            out(q, c) = m(q, (c + q) % n);
    return out;
}

Matrix unroll_rows(const Matrix &m) {
    require_square(m, "unroll_rows");
    const std::size_t n = m.rows();
    Matrix out(n, n);
    for (std::size_t q = 0; q < n; ++q)
        for (std::size_t c = 0; c < n; ++c)
            out(q, (c + q) % n) = m(q, c);
    return out;
}

void GaussianTargetSpec::validate() const {
    if (!(sigma > 0.0) || !std::isfinite(sigma))
        throw ConfigError("gaussian target: sigma must be positive");
    if (window && !(*window >= 0.0))
        throw ConfigError("gaussian target: window radius must be non-negative");
}

Matrix gaussian_attention_target(const GaussianTargetSpec &spec, bool row_normalize) {
    spec.validate();
    const std::size_t n = spec.geom.seq_len();
    Matrix m(n, n);
    const double denom = 2.0 * spec.sigma * spec.sigma;
    for (std::size_t q = 0; q < n; ++q) {
        const auto [iq, jq] = unflatten_index(q, spec.geom);
        for (std::size_t r = 0; r < n; ++r) {
            const auto [ir, jr] = unflatten_index(r, spec.geom);
            const double di = static_cast<double>(iq) - static_cast<double>(ir);
            const double dj = static_cast<double>(jq) - static_cast<double>(jr);
            const double d2 = di * di + dj * dj;
            if (spec.window && d2 > *spec.window * *spec.window)
                continue;
            m(q, r) = std::exp(-d2 / denom);
        }
    }
    if (row_normalize)
        for (std::size_t q = 0; q < n; ++q) {
            double s = 0.0;
            for (double v : m.row(q))
                s += v;
            for (double &v : m.row(q))
                v /= s;
        }
    return m;
}

SubMaskPair::SubMaskPair(Matrix a, Matrix b) : a_(std::move(a)), b_(std::move(b)) {
    if (!a_.same_shape(b_))
        throw DimensionError("sub-mask factors differ in shape: " + a_.shape_string() + " vs " + b_.shape_string());
    if (a_.rows() == 0 || a_.rows() > a_.cols())
        throw DimensionError("sub-mask fidelity must be in [1, seq_len], got shape " + a_.shape_string());
}

SubMaskPair SubMaskPair::random(std::size_t mask_fidelity, std::size_t seq_len, std::mt19937_64 &rng) {
    const double s = std::sqrt(1.0 / static_cast<double>(seq_len));
    Matrix a = Matrix::uniform(mask_fidelity, seq_len, -s, s, rng);
    Matrix b = Matrix::uniform(mask_fidelity, seq_len, -s, s, rng);
    return SubMaskPair(std::move(a), std::move(b));
}

Matrix compose_mask(const SubMaskPair &pair) { return unroll_rows(matmul_tn(pair.a(), pair.b())); }

MaskTrainingResult train_mask_weights(const Matrix &rolled_target, std::size_t mask_fidelity,
                                      const MaskTrainingOptions &opts) {
    require_square(rolled_target, "train_mask_weights");
    if (opts.epochs == 0)
        throw ConfigError("train_mask_weights: epochs must be >= 1");
    if (!(opts.lr > 0.0))
        throw ConfigError("train_mask_weights: lr must be positive");
    const std::size_t n = rolled_target.rows();
    if (mask_fidelity == 0 || mask_fidelity > n)
        throw ConfigError("train_mask_weights: mask_fidelity must be in [1, " + std::to_string(n) + "]");

    std::mt19937_64 rng(opts.seed);
    SubMaskPair pair = SubMaskPair::random(mask_fidelity, n, rng);
    MaskTrainingResult result{pair, {}, 0.0, 0.0};
    result.mse_history.reserve(opts.epochs + 1);

    const double row_scale = static_cast<double>(n);
    bool stopped_early = false;
    for (std::size_t step = 0; step < opts.epochs; ++step) {
        Tape tape;
        Var a = tape.parameter(pair.a());
        Var b = tape.parameter(pair.b());
        Var mse = ad::mse(ad::matmul_tn(a, b), rolled_target);
        Var loss = ad::scale(mse, row_scale);
        const double current = mse.value()[0];
        if (!std::isfinite(current))
            throw TrainingError("train_mask_weights: loss diverged", step);
        result.mse_history.push_back(current);
        if (opts.early_stop_mse > 0.0 && current < opts.early_stop_mse) {
            stopped_early = true;
            break;
        }
        tape.backward(loss);
        Matrix ga = a.grad();
        Matrix gb = b.grad();
        pair.a() -= opts.lr * std::move(ga);
        pair.b() -= opts.lr * std::move(gb);
    }
    const double last = mean_squared_error(matmul_tn(pair.a(), pair.b()), rolled_target);
    if (!std::isfinite(last))
        throw TrainingError("train_mask_weights: loss diverged", opts.epochs);
    if (!stopped_early)
        result.mse_history.push_back(last);
    result.initial_mse = result.mse_history.front();
    result.final_mse = last;
    result.pair = std::move(pair);
    return result;
}

MaskTrainingResult train_mask_weights(const GaussianTargetSpec &spec, std::size_t mask_fidelity,
                                      const MaskTrainingOptions &opts) {
    return train_mask_weights(roll_rows(gaussian_attention_target(spec)), mask_fidelity, opts);
}

namespace {
constexpr char kMaskMagic[4] = {'I', 'B', 'M', 'K'};
} // namespace

void write_mask_pair(std::ostream &os, const SubMaskPair &pair) {
    os.write(kMaskMagic, 4);
    binio::write_u32_le(os, kMaskFileVersion);
    binio::write_u32_le(os, static_cast<std::uint32_t>(pair.mask_fidelity()));
    binio::write_u32_le(os, static_cast<std::uint32_t>(pair.seq_len()));
    for (double v : pair.a().values())
        binio::write_f64_le(os, v);
    for (double v : pair.b().values())
        binio::write_f64_le(os, v);
}

SubMaskPair read_mask_pair(std::istream &is) {
    char magic[4];
    binio::read_exact(is, magic, 4, "mask file");
    if (std::string(magic, 4) != std::string(kMaskMagic, 4))
        throw FormatError("mask file: bad magic at offset 0");
    const auto version = binio::read_u32_le(is, "mask file");
    if (version != kMaskFileVersion)
        throw FormatError("mask file: unsupported version " + std::to_string(version) + " at offset 4");
    const auto fidelity = binio::read_u32_le(is, "mask file");
    const auto seq_len = binio::read_u32_le(is, "mask file");
    auto read_factor = [&] {
        std::vector<double> v(static_cast<std::size_t>(fidelity) * seq_len);
        for (auto &x : v)
            x = binio::read_f64_le(is, "mask file");
        return Matrix(fidelity, seq_len, std::move(v));
    };
    Matrix a = read_factor();
    Matrix b = read_factor();
    return SubMaskPair(std::move(a), std::move(b));
}

void save_mask_pair(const std::filesystem::path &path, const SubMaskPair &pair) {
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw FormatError("cannot open " + path.string() + " for writing");
    write_mask_pair(os, pair);
    if (!os)
        throw FormatError("write failed: " + path.string());
}

SubMaskPair load_mask_pair(const std::filesystem::path &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw FormatError("cannot open " + path.string());
    return read_mask_pair(is);
}

} // namespace ibit
