#include "ibit/explain.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "ibit/errors.hpp"
#include "ibit/mask.hpp"

namespace ibit {

Matrix rollout_layer_matrix(const AttentionTrace &trace, std::size_t sample) {
    if (!trace.valid())
        throw StateError("rollout: empty attention trace");
    if (sample >= trace.batch)
        throw IndexError("rollout: sample " + std::to_string(sample) + " outside batch of " +
                         std::to_string(trace.batch));
    const std::size_t n = trace.seq;
    Matrix avg(n, n);
    for (std::size_t h = 0; h < trace.num_heads; ++h) {
        const Matrix &a = trace.masked_attention[trace.index(sample, h)];
        for (std::size_t i = 0; i < avg.size(); ++i)
            avg[i] += std::abs(a[i]);
    }
    avg *= 1.0 / static_cast<double>(trace.num_heads);
    for (std::size_t i = 0; i < n; ++i)
        avg(i, i) += 1.0;
    for (std::size_t r = 0; r < n; ++r) {
        double s = 0.0;
        for (double v : avg.row(r))
            s += v;
        for (double &v : avg.row(r))
            v /= s;
    }
    return avg;
}

RolloutMap attention_rollout(std::span<const AttentionTrace *const> traces, const GridGeometry &geom,
                             std::size_t sample) {
    if (traces.empty())
        throw ConfigError("rollout: need at least one layer trace");
    for (const auto *t : traces)
        if (t == nullptr || !t->has_cls || t->seq != geom.seq_len() + 1)
            throw DimensionError("rollout: every trace must cover " + std::to_string(geom.seq_len()) +
                                 " patches plus a CLS token");
    Matrix joint = rollout_layer_matrix(*traces[0], sample);
    for (std::size_t l = 1; l < traces.size(); ++l)
        joint = matmul(rollout_layer_matrix(*traces[l], sample), joint);

    Matrix values(geom.height(), geom.width());
    double total = 0.0;
    for (std::size_t p = 0; p < geom.seq_len(); ++p) {
        values[p] = joint(0, p + 1);
        total += values[p];
    }
    if (total > 0.0)
        values *= 1.0 / total;
    else
        values = Matrix(geom.height(), geom.width(), 1.0 / static_cast<double>(geom.seq_len()));
    return RolloutMap{geom, std::move(values)};
}

RolloutMap model_rollout(const Model &model, const Matrix &image) {
    Tape tape(model.config.precision);
    const std::vector<Matrix> batch = {image};
    ForwardPass fp = model_forward(tape, model, batch);
    std::vector<const AttentionTrace *> ptrs;
    for (const auto &t : fp.traces)
        ptrs.push_back(t.get());
    return attention_rollout(ptrs, model.grid());
}

std::vector<unsigned char> heatmap_pixels(const Matrix &m) {
    if (!m.all_finite())
        throw DimensionError("heatmap: non-finite entries");
    std::vector<unsigned char> px(m.size(), 128);
    if (m.empty())
        return px;
    const auto [lo_it, hi_it] = std::minmax_element(m.values().begin(), m.values().end());
    const double lo = *lo_it;
    const double hi = *hi_it;
    if (hi > lo)
        for (std::size_t i = 0; i < m.size(); ++i)
            px[i] = static_cast<unsigned char>(std::lround(255.0 * (m[i] - lo) / (hi - lo)));
    return px;
}

HeatmapFiles export_heatmap(const Matrix &m, const std::filesystem::path &base) {
    const auto pixels = heatmap_pixels(m);
    HeatmapFiles files{base, base};
    files.csv += ".csv";
    files.pgm += ".pgm";

    std::ofstream csv(files.csv, std::ios::binary);
    if (!csv)
        throw FormatError("cannot open " + files.csv.string() + " for writing");
    char buf[32];
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) {
            std::snprintf(buf, sizeof buf, "%.17g", m(r, c));
            if (c > 0)
                csv << ',';
            csv << buf;
        }
        csv << '\n';
    }
    if (!csv)
        throw FormatError("write failed: " + files.csv.string());

    std::ofstream pgm(files.pgm, std::ios::binary);
    if (!pgm)
        throw FormatError("cannot open " + files.pgm.string() + " for writing");
    pgm << "P5\n" << m.cols() << ' ' << m.rows() << "\n255\n";
    pgm.write(reinterpret_cast<const char *>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!pgm)
        throw FormatError("write failed: " + files.pgm.string());
    return files;
}

Matrix read_pgm(const std::filesystem::path &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw FormatError("cannot open " + path.string());
    auto next_token = [&] {
        std::string tok;
        char ch = 0;
        while (is.get(ch)) {
            if (ch == '#') {
                std::string skip;
                std::getline(is, skip);
                continue;
            }
            if (std::isspace(static_cast<unsigned char>(ch))) {
                if (!tok.empty())
                    break;
                continue;
            }
            tok.push_back(ch);
        }
        return tok;
    };
    if (next_token() != "P5")
        throw FormatError(path.string() + ": not a binary PGM (P5) at offset 0");
    std::size_t w = 0, h = 0, maxval = 0;
    try {
        w = std::stoul(next_token());
        h = std::stoul(next_token());
        maxval = std::stoul(next_token());
    } catch (const std::exception &) {
        throw FormatError(path.string() + ": malformed PGM header");
    }
    if (maxval == 0 || maxval > 255)
        throw FormatError(path.string() + ": only 8-bit PGM is supported");
    std::vector<unsigned char> buf(w * h);
    is.read(reinterpret_cast<char *>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(is.gcount()) != buf.size())
        throw FormatError(path.string() + ": truncated pixel data");
    Matrix m(h, w);
    for (std::size_t i = 0; i < buf.size(); ++i)
        m[i] = static_cast<double>(buf[i]) / static_cast<double>(maxval);
    return m;
}

std::vector<HeatmapFiles> export_mask_evolution(std::span<const ModelCheckpoint> checkpoints, std::size_t layer,
                                                std::size_t head, const std::filesystem::path &prefix) {
    std::vector<HeatmapFiles> out;
    if (checkpoints.empty())
        return out;
    const std::string config = config_to_json(checkpoints.front().model.config);
    for (const auto &ck : checkpoints) {
        if (config_to_json(ck.model.config) != config)
            throw ConfigError("mask evolution: checkpoints do not share a config");
        const SubMaskPair pair = ck.model.mask_pair(layer, head);
        char suffix[32];
        std::snprintf(suffix, sizeof suffix, "_epoch%03zu", ck.epoch);
        std::filesystem::path base = prefix;
        base += suffix;
        out.push_back(export_heatmap(compose_mask(pair), base));
    }
    return out;
}

double diagonal_band_mass(const Matrix &mask, const GridGeometry &geom, double radius) {
    if (mask.rows() != geom.seq_len() || mask.cols() != geom.seq_len())
        throw DimensionError("diagonal_band_mass: mask " + mask.shape_string() + " does not match grid");
    double inside = 0.0;
    double total = 0.0;
    for (std::size_t q = 0; q < geom.seq_len(); ++q) {
        const auto [iq, jq] = unflatten_index(q, geom);
        for (std::size_t r = 0; r < geom.seq_len(); ++r) {
            const auto [ir, jr] = unflatten_index(r, geom);
            const double di = static_cast<double>(iq) - static_cast<double>(ir);
            const double dj = static_cast<double>(jq) - static_cast<double>(jr);
            const double v = std::abs(mask(q, r));
            total += v;
            if (di * di + dj * dj <= radius * radius)
                inside += v;
        }
    }
    return total > 0.0 ? inside / total : 0.0;
}

} // namespace ibit
