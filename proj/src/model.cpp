#include "ibit/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "ibit/binio.hpp"
#include "ibit/errors.hpp"
#include "ibit/mask.hpp"

namespace ibit {

using nlohmann::json;

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finalizer
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

enum Stream : std::uint64_t { kWeights = 0, kMasks = 1, kShuffle = 2, kDropPath = 3, kAugment = 4 };

Matrix trunc_normal(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64 &rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (auto &v : m.values()) {
        double x = dist(rng);
        while (std::abs(x) > 2.0 * stddev)
            x = dist(rng);
        v = x;
    }
    return m;
}

std::string norm_to_string(AttentionNorm n) { return n == AttentionNorm::row_l1 ? "row_l1" : "frobenius"; }

AttentionNorm norm_from_string(const std::string &s) {
    if (s == "row_l1")
        return AttentionNorm::row_l1;
    if (s == "frobenius")
        return AttentionNorm::frobenius;
    throw ConfigError("unknown attention_norm '" + s + "'");
}

std::string block_prefix(std::size_t l) { return "blocks." + std::to_string(l) + "."; }

bool is_mask_param(const std::string &name) { return name.find(".attn.mask") != std::string::npos; }

bool is_decayed(const std::string &name) {
    const auto ends_with = [&](const std::string &suffix) {
        return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    return ends_with(".weight") || ends_with(".w_queries") || ends_with(".w_keys") || ends_with(".w_values");
}

} // namespace

std::string to_string(Variant v) { return v == Variant::ibit ? "ibit" : "baseline"; }

Variant variant_from_string(const std::string &s) {
    if (s == "ibit")
        return Variant::ibit;
    if (s == "baseline")
        return Variant::baseline;
    throw ConfigError("unknown variant '" + s + "' (expected ibit or baseline)");
}

void TrainConfig::validate() const {
    if (layers == 0 || heads == 0 || d_model == 0 || patch_size == 0 || mlp_ratio == 0)
        throw ConfigError("config: layers, heads, d_model, patch_size and mlp_ratio must be >= 1");
    if (d_model % heads != 0)
        throw ConfigError("config: d_model " + std::to_string(d_model) + " not divisible by heads " +
                          std::to_string(heads));
    if (!(dataset_fraction > 0.0 && dataset_fraction <= 1.0))
        throw ConfigError("config: dataset_fraction must be in (0, 1]");
    if (!(lr > 0.0) || weight_decay < 0.0)
        throw ConfigError("config: lr must be positive and weight_decay non-negative");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0)
        throw ConfigError("config: label_smoothing must be in [0, 1)");
    if (drop_path < 0.0 || drop_path >= 1.0)
        throw ConfigError("config: drop_path must be in [0, 1)");
    if (schedule != "cosine-warmup")
        throw ConfigError("config: unsupported schedule '" + schedule + "'");
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0)
        throw ConfigError("config: warmup_fraction must be in [0, 1)");
    if (epochs == 0 || batch_size == 0)
        throw ConfigError("config: epochs and batch_size must be >= 1");
    if (mask_filter == 0 || !(mask_sigma > 0.0) || mask_epochs == 0 || !(mask_lr > 0.0))
        throw ConfigError("config: invalid mask pretraining settings");
}

TrainConfig TrainConfig::reference_scale() {
    TrainConfig c;
    c.layers = 12;
    c.heads = 3;
    c.d_model = 192;
    c.lr = 1e-3;
    c.weight_decay = 0.005;
    c.label_smoothing = 0.1;
    c.drop_path = 0.0;
    c.epochs = 300;
    c.patch_size = 16;
    c.batch_size = 256;
    return c;
}

std::string config_to_json(const TrainConfig &c) {
    json j = {
        {"layers", c.layers},
        {"heads", c.heads},
        {"d_model", c.d_model},
        {"mlp_ratio", c.mlp_ratio},
        {"patch_size", c.patch_size},
        {"lr", c.lr},
        {"weight_decay", c.weight_decay},
        {"label_smoothing", c.label_smoothing},
        {"drop_path", c.drop_path},
        {"schedule", c.schedule},
        {"warmup_fraction", c.warmup_fraction},
        {"epochs", c.epochs},
        {"batch_size", c.batch_size},
        {"seed", c.seed},
        {"dataset_fraction", c.dataset_fraction},
        {"crop_padding", c.crop_padding},
        {"hflip", c.hflip},
        {"mask_filter", c.mask_filter},
        {"mask_sigma", c.mask_sigma},
        {"mask_epochs", c.mask_epochs},
        {"mask_lr", c.mask_lr},
        {"shared_mask", c.shared_mask},
        {"freeze_masks", c.freeze_masks},
        {"mask_init", c.mask_init == MaskInit::pretrained ? "pretrained" : "ones"},
        {"attention_norm", norm_to_string(c.attention_norm)},
        {"precision", c.precision == Precision::f64 ? "f64" : "f32"},
    };
    return j.dump();
}

TrainConfig config_from_json(const std::string &text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error &e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    if (!j.is_object())
        throw ConfigError("config: expected a JSON object");
    TrainConfig c;
    try {
        for (const auto &[key, value] : j.items()) {
            if (key == "layers") c.layers = value.get<std::size_t>();
            else if (key == "heads") c.heads = value.get<std::size_t>();
            else if (key == "d_model") c.d_model = value.get<std::size_t>();
            else if (key == "mlp_ratio") c.mlp_ratio = value.get<std::size_t>();
            else if (key == "patch_size") c.patch_size = value.get<std::size_t>();
            else if (key == "lr") c.lr = value.get<double>();
            else if (key == "weight_decay") c.weight_decay = value.get<double>();
            else if (key == "label_smoothing") c.label_smoothing = value.get<double>();
            else if (key == "drop_path") c.drop_path = value.get<double>();
            else if (key == "schedule") c.schedule = value.get<std::string>();
            else if (key == "warmup_fraction") c.warmup_fraction = value.get<double>();
            else if (key == "epochs") c.epochs = value.get<std::size_t>();
            else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
            else if (key == "seed") c.seed = value.get<std::uint64_t>();
            else if (key == "dataset_fraction") c.dataset_fraction = value.get<double>();
            else if (key == "crop_padding") c.crop_padding = value.get<std::size_t>();
            else if (key == "hflip") c.hflip = value.get<bool>();
            else if (key == "mask_filter") c.mask_filter = value.get<std::size_t>();
            else if (key == "mask_sigma") c.mask_sigma = value.get<double>();
            else if (key == "mask_epochs") c.mask_epochs = value.get<std::size_t>();
            else if (key == "mask_lr") c.mask_lr = value.get<double>();
            else if (key == "shared_mask") c.shared_mask = value.get<bool>();
            else if (key == "freeze_masks") c.freeze_masks = value.get<bool>();
            else if (key == "mask_init") {
                const auto s = value.get<std::string>();
                if (s == "pretrained") c.mask_init = MaskInit::pretrained;
                else if (s == "ones") c.mask_init = MaskInit::ones;
                else throw ConfigError("config: unknown mask_init '" + s + "'");
            } else if (key == "attention_norm") c.attention_norm = norm_from_string(value.get<std::string>());
            else if (key == "precision") {
                const auto s = value.get<std::string>();
                if (s == "f64") c.precision = Precision::f64;
                else if (s == "f32") c.precision = Precision::f32;
                else throw ConfigError("config: unknown precision '" + s + "'");
            } else
                throw ConfigError("config: unknown field '" + key + "'");
        }
    } catch (const json::type_error &e) {
        throw ConfigError(std::string("config: wrong value type: ") + e.what());
    }
    c.validate();
    return c;
}

Matrix &ParameterStore::add(const std::string &name, Matrix value) {
    if (contains(name))
        throw ConfigError("parameter '" + name + "' registered twice");
    entries_.emplace_back(name, std::move(value));
    return entries_.back().second;
}

Matrix &ParameterStore::at(const std::string &name) {
    for (auto &[n, m] : entries_)
        if (n == name)
            return m;
    throw IndexError("no parameter named '" + name + "'");
}

const Matrix &ParameterStore::at(const std::string &name) const {
    return const_cast<ParameterStore *>(this)->at(name);
}

bool ParameterStore::contains(const std::string &name) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const auto &e) { return e.first == name; });
}

std::size_t ParameterStore::scalar_count() const noexcept {
    std::size_t n = 0;
    for (const auto &e : entries_)
        n += e.second.size();
    return n;
}

GridGeometry Model::grid() const {
    return GridGeometry(image_height / config.patch_size, image_width / config.patch_size);
}

std::string Model::mask_name(std::size_t layer, std::size_t head, char factor) {
    return block_prefix(layer) + "attn.mask" + std::to_string(head) + "." + factor;
}

SubMaskPair Model::mask_pair(std::size_t layer, std::size_t head) const {
    if (variant != Variant::ibit)
        throw StateError("baseline model has no inductive masks");
    if (layer >= config.layers || head >= config.heads)
        throw IndexError("mask (" + std::to_string(layer) + ", " + std::to_string(head) + ") out of range for " +
                         std::to_string(config.layers) + " layers x " + std::to_string(config.heads) + " heads");
    const std::size_t h = config.shared_mask ? 0 : head;
    return SubMaskPair(params.at(mask_name(layer, h, 'a')), params.at(mask_name(layer, h, 'b')));
}

Model build_model(const TrainConfig &config, Variant variant, std::size_t image_height, std::size_t image_width,
                  std::size_t num_classes) {
    config.validate();
    if (image_height % config.patch_size != 0 || image_width % config.patch_size != 0 || image_height == 0 ||
        image_width == 0)
        throw ConfigError("config: image " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                          " not divisible into " + std::to_string(config.patch_size) + "-pixel patches");
    if (num_classes < 2)
        throw ConfigError("config: need at least 2 classes");

    Model m;
    m.config = config;
    m.variant = variant;
    m.image_height = image_height;
    m.image_width = image_width;
    m.num_classes = num_classes;
    const GridGeometry grid = m.grid();
    const std::size_t d = config.d_model;
    const std::size_t hidden = d * config.mlp_ratio;
    const std::size_t pdim = config.patch_size * config.patch_size;
    if (variant == Variant::ibit && config.mask_filter * config.mask_filter > grid.seq_len())
        throw ConfigError("config: mask fidelity exceeds the token count");

    std::mt19937_64 rng(derive_seed(config.seed, kWeights));
    // Attention projections and embeddings start small; dense layers use a
    // fan-in scaled uniform draw.
    constexpr double kStd = 0.02;
    auto dense = [&rng](std::size_t fan_in, std::size_t fan_out) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        return Matrix::uniform(fan_in, fan_out, -bound, bound, rng);
    };

    SubMaskPair mask_init = [&] {
        const std::size_t fidelity = std::min(config.mask_filter * config.mask_filter, grid.seq_len());
        if (variant != Variant::ibit || config.mask_init == MaskInit::ones) {
            Matrix a(fidelity, grid.seq_len());
            for (std::size_t c = 0; c < grid.seq_len(); ++c)
                a(0, c) = 1.0;
            return SubMaskPair(a, a);
        }
        MaskTrainingOptions opts;
        opts.epochs = config.mask_epochs;
        opts.lr = config.mask_lr;
        opts.seed = derive_seed(config.seed, kMasks);
        return train_mask_weights(GaussianTargetSpec{grid, config.mask_sigma, std::nullopt}, fidelity, opts).pair;
    }();

    auto &p = m.params;
    p.add("patch_embed.weight", dense(pdim, d));
    p.add("patch_embed.bias", Matrix(1, d));
    p.add("cls_token", trunc_normal(1, d, kStd, rng));
    p.add("pos_embed", trunc_normal(grid.seq_len() + 1, d, kStd, rng));
    for (std::size_t l = 0; l < config.layers; ++l) {
        const std::string b = block_prefix(l);
        p.add(b + "norm1.gamma", Matrix(1, d, 1.0));
        p.add(b + "norm1.beta", Matrix(1, d));
        p.add(b + "attn.w_queries", trunc_normal(d, d, kStd, rng));
        p.add(b + "attn.w_keys", trunc_normal(d, d, kStd, rng));
        p.add(b + "attn.w_values", trunc_normal(d, d, kStd, rng));
        if (variant == Variant::ibit) {
            const std::size_t pairs = config.shared_mask ? 1 : config.heads;
            for (std::size_t h = 0; h < pairs; ++h) {
                p.add(Model::mask_name(l, h, 'a'), mask_init.a());
                p.add(Model::mask_name(l, h, 'b'), mask_init.b());
            }
        }
        p.add(b + "norm2.gamma", Matrix(1, d, 1.0));
        p.add(b + "norm2.beta", Matrix(1, d));
        p.add(b + "mlp.fc1.weight", dense(d, hidden));
        p.add(b + "mlp.fc1.bias", Matrix(1, hidden));
        p.add(b + "mlp.fc2.weight", dense(hidden, d));
        p.add(b + "mlp.fc2.bias", Matrix(1, d));
    }
    p.add("norm.gamma", Matrix(1, d, 1.0));
    p.add("norm.beta", Matrix(1, d));
    p.add("head.weight", dense(d, num_classes));
    p.add("head.bias", Matrix(1, num_classes));
    return m;
}

Matrix extract_patches(std::span<const Matrix> images, std::size_t patch_size) {
    if (images.empty())
        throw DimensionError("extract_patches: empty batch");
    const std::size_t h = images.front().rows();
    const std::size_t w = images.front().cols();
    if (h % patch_size != 0 || w % patch_size != 0)
        throw DimensionError("extract_patches: image " + images.front().shape_string() + " not divisible by patch " +
                             std::to_string(patch_size));
    const std::size_t gh = h / patch_size;
    const std::size_t gw = w / patch_size;
    Matrix out(images.size() * gh * gw, patch_size * patch_size);
    for (std::size_t b = 0; b < images.size(); ++b) {
        if (!images[b].same_shape(images.front()))
            throw DimensionError("extract_patches: ragged batch");
        for (std::size_t pi = 0; pi < gh; ++pi)
            for (std::size_t pj = 0; pj < gw; ++pj) {
                auto row = out.row(b * gh * gw + pi * gw + pj);
                for (std::size_t y = 0; y < patch_size; ++y)
                    for (std::size_t x = 0; x < patch_size; ++x)
                        row[y * patch_size + x] = images[b](pi * patch_size + y, pj * patch_size + x);
            }
    }
    return out;
}

namespace {

// Prepends the CLS token to each sample's patch embeddings and adds positions.
Var assemble_tokens(Var patches, Var cls, Var pos, std::size_t batch) {
    const Matrix &pv = patches.value();
    const Matrix &cv = cls.value();
    const Matrix &posv = pos.value();
    const std::size_t n_patch = pv.rows() / batch;
    const std::size_t seq = n_patch + 1;
    const std::size_t d = pv.cols();
    if (posv.rows() != seq || posv.cols() != d || cv.rows() != 1 || cv.cols() != d)
        throw DimensionError("assemble_tokens: embedding shapes disagree");
    Matrix x(batch * seq, d);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < d; ++c)
            x(b * seq, c) = cv[c] + posv(0, c);
        for (std::size_t t = 0; t < n_patch; ++t)
            for (std::size_t c = 0; c < d; ++c)
                x(b * seq + 1 + t, c) = pv(b * n_patch + t, c) + posv(1 + t, c);
    }
    return patches.tape().record(std::move(x), {patches, cls, pos},
                                 [batch, n_patch, seq, d](const Matrix &g, std::vector<Matrix> &out) {
                                     Matrix gp(batch * n_patch, d);
                                     Matrix gc(1, d);
                                     Matrix gpos(seq, d);
                                     for (std::size_t b = 0; b < batch; ++b) {
                                         for (std::size_t c = 0; c < d; ++c) {
                                             gc[c] += g(b * seq, c);
                                             gpos(0, c) += g(b * seq, c);
                                         }
                                         for (std::size_t t = 0; t < n_patch; ++t)
                                             for (std::size_t c = 0; c < d; ++c) {
                                                 gp(b * n_patch + t, c) = g(b * seq + 1 + t, c);
                                                 gpos(1 + t, c) += g(b * seq + 1 + t, c);
                                             }
                                     }
                                     out[0] = std::move(gp);
                                     out[1] = std::move(gc);
                                     out[2] = std::move(gpos);
                                 });
}

// Records one attention layer as a single tape node backed by the explicit
// LMSA forward/backward pair.
Var attention_node(Var x, Var wq, Var wk, Var wv, const std::vector<std::pair<Var, Var>> &masks, Variant variant,
                   std::size_t heads, std::size_t batch, const GridGeometry &grid, const LMSAOptions &opts,
                   std::shared_ptr<const AttentionTrace> &trace_out) {
    LMSAParams p;
    p.w_queries = wq.value();
    p.w_keys = wk.value();
    p.w_values = wv.value();
    p.num_heads = heads;
    for (const auto &[a, b] : masks)
        p.masks.emplace_back(a.value(), b.value());

    LMSAResult res = variant == Variant::ibit ? lmsa_forward(x.value(), batch, p, grid, opts)
                                              : baseline_attention_forward(x.value(), batch, p, grid, opts);
    auto trace = std::make_shared<const AttentionTrace>(std::move(res.trace));
    trace_out = trace;

    std::vector<Var> parents = {x, wq, wk, wv};
    for (const auto &[a, b] : masks) {
        parents.push_back(a);
        parents.push_back(b);
    }
    const std::size_t n_masks = masks.size();
    return x.tape().record(std::move(res.output), std::move(parents),
                           [trace, p = std::move(p), n_masks](const Matrix &g, std::vector<Matrix> &out) {
                               LMSAGradients gr = lmsa_backward(*trace, p, g);
                               out[0] = std::move(gr.input);
                               out[1] = std::move(gr.w_queries);
                               out[2] = std::move(gr.w_keys);
                               out[3] = std::move(gr.w_values);
                               for (std::size_t m = 0; m < n_masks; ++m) {
                                   out[4 + 2 * m] = std::move(gr.mask_a[m]);
                                   out[5 + 2 * m] = std::move(gr.mask_b[m]);
                               }
                           });
}

Var linear(Var x, Var w, Var b) { return ad::add_row_bias(ad::matmul(x, w), b); }

} // namespace

ForwardPass model_forward(Tape &tape, const Model &model, std::span<const Matrix> images, const ForwardOptions &opts) {
    const TrainConfig &cfg = model.config;
    const std::size_t batch = images.size();
    if (batch == 0)
        throw DimensionError("model_forward: empty batch");
    for (const auto &img : images)
        if (img.rows() != model.image_height || img.cols() != model.image_width)
            throw DimensionError("model_forward: image " + img.shape_string() + " does not match model input " +
                                 std::to_string(model.image_height) + "x" + std::to_string(model.image_width));
    const bool drop = opts.training && cfg.drop_path > 0.0;
    if (drop && opts.rng == nullptr)
        throw StateError("model_forward: drop path needs an rng");

    ForwardPass fp;
    fp.param_vars.reserve(model.params.size());
    for (const auto &[name, value] : model.params) {
        const bool trainable = opts.params_require_grad && !(cfg.freeze_masks && is_mask_param(name));
        fp.param_vars.push_back(trainable ? tape.parameter(value) : tape.constant(value));
    }
    std::size_t next = 0;
    auto take = [&]() -> Var { return fp.param_vars.at(next++); };

    const GridGeometry grid = model.grid();
    const std::size_t seq = grid.seq_len() + 1;
    LMSAOptions attn_opts;
    attn_opts.norm = cfg.attention_norm;

    auto drop_path = [&](Var branch) {
        if (!drop)
            return branch;
        std::bernoulli_distribution keep(1.0 - cfg.drop_path);
        std::vector<double> factors(batch);
        for (auto &f : factors)
            f = keep(*opts.rng) ? 1.0 / (1.0 - cfg.drop_path) : 0.0;
        return ad::scale_row_groups(branch, std::move(factors), seq);
    };

    Var patch_w = take();
    Var patch_b = take();
    Var cls = take();
    Var pos = take();
    Var patches = tape.constant(extract_patches(images, cfg.patch_size));
    Var x = assemble_tokens(linear(patches, patch_w, patch_b), cls, pos, batch);

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        Var g1 = take();
        Var b1 = take();
        Var wq = take();
        Var wk = take();
        Var wv = take();
        std::vector<std::pair<Var, Var>> masks;
        if (model.variant == Variant::ibit) {
            const std::size_t pairs = cfg.shared_mask ? 1 : cfg.heads;
            for (std::size_t h = 0; h < pairs; ++h) {
                Var a = take();
                Var b = take();
                masks.emplace_back(a, b);
            }
        }
        std::shared_ptr<const AttentionTrace> trace;
        Var attn = attention_node(ad::layer_norm(x, g1, b1), wq, wk, wv, masks, model.variant, cfg.heads, batch,
                                  grid, attn_opts, trace);
        fp.traces.push_back(std::move(trace));
        x = ad::add(x, drop_path(attn));

        Var g2 = take();
        Var b2 = take();
        Var w1 = take();
        Var c1 = take();
        Var w2 = take();
        Var c2 = take();
        Var mlp = linear(ad::gelu(linear(ad::layer_norm(x, g2, b2), w1, c1)), w2, c2);
        x = ad::add(x, drop_path(mlp));
    }
    Var gn = take();
    Var bn = take();
    Var hw = take();
    Var hb = take();
    std::vector<std::size_t> cls_rows(batch);
    for (std::size_t b = 0; b < batch; ++b)
        cls_rows[b] = b * seq;
    Var feats = ad::gather_rows(ad::layer_norm(x, gn, bn), std::move(cls_rows));
    fp.logits = linear(feats, hw, hb);
    return fp;
}

double cosine_warmup_lr(std::size_t step, std::size_t total_steps, double peak, double warmup_fraction) {
    if (total_steps == 0)
        return 0.0;
    const auto warmup =
        std::min<std::size_t>(total_steps - 1, static_cast<std::size_t>(std::ceil(warmup_fraction * total_steps)));
    if (step < warmup)
        return peak * static_cast<double>(step) / static_cast<double>(warmup);
    const std::size_t span = total_steps - 1 - warmup;
    if (span == 0)
        return step == warmup && warmup > 0 ? peak : 0.0;
    const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(span));
    return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_step(ParameterStore &params, std::span<const Matrix> grads, AdamWState &state, double lr,
                double weight_decay, const std::function<bool(const std::string &)> &frozen) {
    constexpr double kBeta1 = 0.9;
    constexpr double kBeta2 = 0.999;
    constexpr double kEps = 1e-8;
    if (grads.size() != params.size())
        throw DimensionError("adamw_step: gradient count does not match parameter count");
    if (state.m.empty()) {
        for (const auto &[name, value] : params) {
            state.m.emplace_back(value.rows(), value.cols());
            state.v.emplace_back(value.rows(), value.cols());
        }
    }
    ++state.t;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.t));
    std::size_t i = 0;
    for (auto &[name, value] : params) {
        const Matrix &g = grads[i];
        Matrix &m = state.m[i];
        Matrix &v = state.v[i];
        ++i;
        if (frozen && frozen(name))
            continue;
        const double decay = is_decayed(name) ? lr * weight_decay : 0.0;
        for (std::size_t k = 0; k < value.size(); ++k) {
            m[k] = kBeta1 * m[k] + (1.0 - kBeta1) * g[k];
            v[k] = kBeta2 * v[k] + (1.0 - kBeta2) * g[k] * g[k];
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            value[k] -= decay * value[k];
            value[k] -= lr * mhat / (std::sqrt(vhat) + kEps);
        }
    }
}

namespace {

Matrix augment(const Matrix &img, const TrainConfig &cfg, std::mt19937_64 &rng) {
    Matrix out = img;
    if (cfg.crop_padding > 0) {
        const auto pad = static_cast<long>(cfg.crop_padding);
        std::uniform_int_distribution<long> shift(-pad, pad);
        const long dy = shift(rng);
        const long dx = shift(rng);
        const auto h = static_cast<long>(img.rows());
        const auto w = static_cast<long>(img.cols());
        for (long y = 0; y < h; ++y)
            for (long x = 0; x < w; ++x) {
                const long sy = y + dy;
                const long sx = x + dx;
                out(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
                    (sy >= 0 && sy < h && sx >= 0 && sx < w) ? img(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx))
                                                             : 0.0;
            }
    }
    if (cfg.hflip && std::bernoulli_distribution(0.5)(rng)) {
        Matrix flipped = out;
        for (std::size_t y = 0; y < out.rows(); ++y)
            for (std::size_t x = 0; x < out.cols(); ++x)
                flipped(y, x) = out(y, out.cols() - 1 - x);
        out = std::move(flipped);
    }
    return out;
}

std::size_t argmax_row(const Matrix &m, std::size_t r) {
    const auto row = m.row(r);
    return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

std::string rng_state_string(const std::mt19937_64 &a, const std::mt19937_64 &b, const std::mt19937_64 &c) {
    std::ostringstream os;
    os << a << ' ' << b << ' ' << c;
    return os.str();
}

} // namespace

TrainingHistory train(Model &model, const LabeledImageSet &train_set, const LabeledImageSet &test_set,
                      const TrainCallbacks &callbacks) {
    const TrainConfig &cfg = model.config;
    if (train_set.empty())
        throw ConfigError("train: empty training set");
    train_set.validate();
    for (int l : train_set.labels)
        if (static_cast<std::size_t>(l) >= model.num_classes)
            throw ConfigError("train: label " + std::to_string(l) + " outside model's " +
                              std::to_string(model.num_classes) + " classes");

    std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, kShuffle));
    std::mt19937_64 drop_rng(derive_seed(cfg.seed, kDropPath));
    std::mt19937_64 augment_rng(derive_seed(cfg.seed, kAugment));

    const std::size_t n = train_set.size();
    const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = steps_per_epoch * cfg.epochs;
    const auto start = std::chrono::steady_clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };

    TrainingHistory history;
    if (callbacks.on_epoch)
        callbacks.on_epoch(model, 0, history, rng_state_string(shuffle_rng, drop_rng, augment_rng));

    AdamWState opt;
    const auto frozen = [&](const std::string &name) { return cfg.freeze_masks && is_mask_param(name); };
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::size_t step = 0;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        double lr = 0.0;
        for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
            const std::size_t lo = s * cfg.batch_size;
            const std::size_t hi = std::min(n, lo + cfg.batch_size);
            std::vector<Matrix> images;
            std::vector<int> labels;
            images.reserve(hi - lo);
            for (std::size_t i = lo; i < hi; ++i) {
                images.push_back(augment(train_set.images[order[i]], cfg, augment_rng));
                labels.push_back(train_set.labels[order[i]]);
            }

            Tape tape(cfg.precision);
            ForwardOptions fo;
            fo.training = true;
            fo.rng = &drop_rng;
            fo.params_require_grad = true;
            ForwardPass fp = model_forward(tape, model, images, fo);
            Var loss = ad::cross_entropy(fp.logits, labels, cfg.label_smoothing);
            const double loss_value = loss.value()[0];
            if (!std::isfinite(loss_value)) {
                std::string where = "head";
                for (std::size_t l = 0; l < fp.traces.size(); ++l)
                    if (!fp.traces[l]->queries.all_finite() || !fp.traces[l]->input.all_finite()) {
                        where = "blocks." + std::to_string(l);
                        break;
                    }
                throw TrainingError("train: non-finite loss in epoch " + std::to_string(epoch) +
                                        ", first non-finite activation at " + where,
                                    step);
            }
            tape.backward(loss);

            std::vector<Matrix> grads;
            grads.reserve(fp.param_vars.size());
            std::size_t pi = 0;
            for (const auto &[name, value] : model.params) {
                const Var &v = fp.param_vars[pi++];
                grads.push_back(tape.requires_grad(v.id()) ? v.grad() : Matrix(value.rows(), value.cols()));
                if (!grads.back().all_finite())
                    throw TrainingError("train: non-finite gradient for parameter " + name, step);
            }
            lr = cosine_warmup_lr(step, total_steps, cfg.lr, cfg.warmup_fraction);
            adamw_step(model.params, grads, opt, lr, cfg.weight_decay, frozen);

            loss_sum += loss_value * static_cast<double>(hi - lo);
            for (std::size_t b = 0; b < labels.size(); ++b)
                if (static_cast<int>(argmax_row(fp.logits.value(), b)) == labels[b])
                    ++correct;
            if (callbacks.on_step)
                callbacks.on_step(StepLog{step, epoch, loss_value, lr, elapsed()});
        }
        EpochMetrics em;
        em.epoch = epoch;
        em.train_loss = loss_sum / static_cast<double>(n);
        em.train_acc = static_cast<double>(correct) / static_cast<double>(n);
        em.test_acc = test_set.empty() ? 0.0 : evaluate(model, test_set);
        em.lr = lr;
        em.wallclock = elapsed();
        history.epochs.push_back(em);
        if (callbacks.on_epoch)
            callbacks.on_epoch(model, epoch, history, rng_state_string(shuffle_rng, drop_rng, augment_rng));
    }
    return history;
}

std::vector<int> predict(const Model &model, std::span<const Matrix> images, std::size_t batch_size) {
    std::vector<int> out;
    out.reserve(images.size());
    for (std::size_t lo = 0; lo < images.size(); lo += batch_size) {
        const std::size_t hi = std::min(images.size(), lo + batch_size);
        Tape tape(model.config.precision);
        ForwardPass fp = model_forward(tape, model, images.subspan(lo, hi - lo));
        for (std::size_t b = 0; b < hi - lo; ++b)
            out.push_back(static_cast<int>(argmax_row(fp.logits.value(), b)));
    }
    return out;
}

double evaluate(const Model &model, const LabeledImageSet &data, std::size_t batch_size) {
    if (data.empty())
        throw ConfigError("evaluate: empty dataset");
    const auto preds = predict(model, data.images, batch_size);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == data.labels[i])
            ++correct;
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace {

constexpr char kCkptMagic[4] = {'I', 'B', 'C', 'K'};

json metrics_to_json(const TrainingHistory &h) {
    json arr = json::array();
    for (const auto &e : h.epochs)
        arr.push_back({{"epoch", e.epoch},
                       {"train_loss", e.train_loss},
                       {"train_acc", e.train_acc},
                       {"test_acc", e.test_acc},
                       {"lr", e.lr}});
    return arr;
}

} // namespace

void write_checkpoint(std::ostream &os, const ModelCheckpoint &ckpt) {
    const Model &m = ckpt.model;
    json header = {{"config", json::parse(config_to_json(m.config))},
                   {"variant", to_string(m.variant)},
                   {"image_height", m.image_height},
                   {"image_width", m.image_width},
                   {"num_classes", m.num_classes},
                   {"epoch", ckpt.epoch},
                   {"rng_state", ckpt.rng_state},
                   {"metrics", metrics_to_json(ckpt.history)}};
    const std::string text = header.dump();
    os.write(kCkptMagic, 4);
    binio::write_u32_le(os, kCheckpointVersion);
    binio::write_u32_le(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto &[name, value] : m.params) {
        binio::write_u32_le(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        binio::write_u32_le(os, static_cast<std::uint32_t>(value.rows()));
        binio::write_u32_le(os, static_cast<std::uint32_t>(value.cols()));
        for (double v : value.values())
            binio::write_f64_le(os, v);
    }
}

ModelCheckpoint read_checkpoint(std::istream &is) {
    const std::string what = "checkpoint";
    char magic[4];
    binio::read_exact(is, magic, 4, what);
    if (std::string(magic, 4) != std::string(kCkptMagic, 4))
        throw FormatError("checkpoint: bad magic at offset 0");
    const auto version = binio::read_u32_le(is, what);
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " at offset 4");
    const auto len = binio::read_u32_le(is, what);
    std::string text(len, '\0');
    binio::read_exact(is, text.data(), len, what);

    ModelCheckpoint ckpt;
    json header;
    try {
        header = json::parse(text);
        Model &m = ckpt.model;
        m.config = config_from_json(header.at("config").dump());
        m.variant = variant_from_string(header.at("variant").get<std::string>());
        m.image_height = header.at("image_height").get<std::size_t>();
        m.image_width = header.at("image_width").get<std::size_t>();
        m.num_classes = header.at("num_classes").get<std::size_t>();
        ckpt.epoch = header.at("epoch").get<std::size_t>();
        ckpt.rng_state = header.at("rng_state").get<std::string>();
        for (const auto &e : header.at("metrics"))
            ckpt.history.epochs.push_back(EpochMetrics{e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(),
                                                       e.at("train_acc").get<double>(), e.at("test_acc").get<double>(),
                                                       e.at("lr").get<double>(), 0.0});
    } catch (const json::exception &e) {
        throw FormatError(std::string("checkpoint: bad header at offset 12: ") + e.what());
    }

    while (is.peek() != std::char_traits<char>::eof()) {
        const auto name_len = binio::read_u32_le(is, what);
        std::string name(name_len, '\0');
        binio::read_exact(is, name.data(), name_len, what);
        const auto rows = binio::read_u32_le(is, what);
        const auto cols = binio::read_u32_le(is, what);
        std::vector<double> data(static_cast<std::size_t>(rows) * cols);
        for (auto &v : data)
            v = binio::read_f64_le(is, what);
        ckpt.model.params.add(name, Matrix(rows, cols, std::move(data)));
    }

    // Shapes must agree with a freshly built model of the same config.
    Model reference = build_model([&] {
        TrainConfig c = ckpt.model.config;
        c.mask_init = MaskInit::ones;
        return c;
    }(), ckpt.model.variant, ckpt.model.image_height, ckpt.model.image_width, ckpt.model.num_classes);
    if (reference.params.size() != ckpt.model.params.size())
        throw FormatError("checkpoint: expected " + std::to_string(reference.params.size()) + " parameters, found " +
                          std::to_string(ckpt.model.params.size()));
    auto it = ckpt.model.params.begin();
    for (const auto &[name, value] : reference.params) {
        if (it->first != name || !it->second.same_shape(value))
            throw FormatError("checkpoint: parameter '" + it->first + "' does not match expected '" + name + "' " +
                              value.shape_string());
        ++it;
    }
    return ckpt;
}

void save_checkpoint(const std::filesystem::path &path, const ModelCheckpoint &ckpt) {
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw FormatError("cannot open " + path.string() + " for writing");
    write_checkpoint(os, ckpt);
    if (!os)
        throw FormatError("write failed: " + path.string());
}

ModelCheckpoint load_checkpoint(const std::filesystem::path &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw FormatError("cannot open " + path.string());
    return read_checkpoint(is);
}

} // namespace ibit
