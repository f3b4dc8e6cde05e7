#include "commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "ibit/convattn.hpp"
#include "ibit/errors.hpp"
#include "ibit/experiment.hpp"
#include "ibit/explain.hpp"
#include "ibit/linalg.hpp"
#include "ibit/mask.hpp"
#include "ibit/model.hpp"

namespace ibit::cli {

namespace fs = std::filesystem;

namespace {

std::string read_text_file(const fs::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw UsageError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Config file (or defaults), then global and per-command overrides.
TrainConfig resolve_config(const Globals &g, const std::string &config_path, std::size_t epochs, double fraction) {
    TrainConfig cfg = config_path.empty() ? TrainConfig{} : config_from_json(read_text_file(config_path));
    if (g.seed_given)
        cfg.seed = g.seed;
    if (g.precision_given)
        cfg.precision = g.resolved_precision();
    if (epochs > 0)
        cfg.epochs = epochs;
    if (fraction > 0.0)
        cfg.dataset_fraction = fraction;
    cfg.validate();
    return cfg;
}

json config_json(const TrainConfig &cfg) { return json::parse(config_to_json(cfg)); }

fs::path parent_or_cwd(const fs::path &file) {
    const fs::path p = file.parent_path();
    return p.empty() ? fs::path(".") : p;
}

std::string ckpt_name(std::size_t epoch) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ckpt_epoch%03zu.ibck", epoch);
    return buf;
}

std::size_t class_count(const TrainTestSplit &s) { return std::max(s.train.num_classes, s.test.num_classes); }

void check_image_shape(const Model &m, const Matrix &image) {
    if (image.rows() != m.image_height || image.cols() != m.image_width)
        throw DimensionError("image is " + std::to_string(image.rows()) + "x" + std::to_string(image.cols()) +
                             " but the model expects " + std::to_string(m.image_height) + "x" +
                             std::to_string(m.image_width));
}

void add_heatmap(Manifest &man, const HeatmapFiles &f) {
    man.add(f.csv);
    man.add(f.pgm);
}

} // namespace

void run_verify_equivalence(const Globals &g, Logger &log, const VerifyOptions &o) {
    if (o.max_grid == 0 || o.trials == 0 || o.filters.empty())
        throw UsageError("--max-grid, --trials and --filters must be positive and non-empty");
    for (std::size_t f : o.filters)
        if (f == 0 || f > o.max_grid)
            throw UsageError("--filters entries must lie in [1, --max-grid]");
    log.event("config", {{"command", "verify-equivalence"},
                         {"globals", g.to_json()},
                         {"max_grid", o.max_grid},
                         {"filters", o.filters},
                         {"trials", o.trials},
                         {"tolerance", o.tolerance},
                         {"out", o.out}});

    std::mt19937_64 rng(g.seed);
    std::ostringstream csv;
    csv << "trial,height,width,filter,max_abs_err,rolled_rank,circular_rolled_rank,pass\n";
    std::size_t failures = 0;
    double worst = 0.0;
    for (std::size_t t = 0; t < o.trials; ++t) {
        const std::size_t f = o.filters[t % o.filters.size()];
        std::uniform_int_distribution<std::size_t> side(f, o.max_grid);
        const GridGeometry geom(side(rng), side(rng));
        const ConvFilter filter(Matrix::uniform(f, f, -1.0, 1.0, rng));
        const Matrix x = Matrix::uniform(geom.height(), geom.width(), -1.0, 1.0, rng);
        const Matrix m = build_conv_attention_matrix(filter, geom);
        const Matrix via_attention = unflatten_grid(attention_apply(m, flatten_grid(x, geom)), geom);
        const double err = max_abs_diff(conv2d_reference(x, filter, geom), via_attention);
        const std::size_t rank = numerical_rank(roll_rows(m));
        const std::size_t circ = numerical_rank(roll_rows(build_conv_attention_matrix(filter, geom, ColumnIndexing::circular)));
        const bool pass = err <= o.tolerance && rank <= f * f && circ <= 1;
        failures += pass ? 0 : 1;
        worst = std::max(worst, err);
        log.event("case", {{"trial", t},
                           {"height", geom.height()},
                           {"width", geom.width()},
                           {"filter", f},
                           {"max_abs_err", err},
                           {"rolled_rank", rank},
                           {"circular_rolled_rank", circ},
                           {"pass", pass}});
        char line[160];
        std::snprintf(line, sizeof line, "%zu,%zu,%zu,%zu,%.17g,%zu,%zu,%d\n", t, geom.height(), geom.width(), f, err,
                      rank, circ, pass ? 1 : 0);
        csv << line;
    }
    if (!o.out.empty()) {
        ensure_directory(o.out);
        Manifest man(o.out);
        const fs::path report = fs::path(o.out) / "equivalence.csv";
        write_text_file(report, csv.str());
        man.add(report);
        man.write();
    }
    log.event("summary", {{"trials", o.trials}, {"failures", failures}, {"worst_abs_err", worst}});
    if (failures > 0)
        throw ValidationFailure(std::to_string(failures) + " of " + std::to_string(o.trials) +
                                " equivalence cases failed");
}

void run_pretrain_mask(const Globals &g, Logger &log, const PretrainOptions &o) {
    if (o.out.empty())
        throw UsageError("--out is required");
    const auto [h, w] = parse_grid(o.grid);
    if (o.filter == 0)
        throw UsageError("--filter must be positive");
    const GaussianTargetSpec spec{GridGeometry(h, w), o.sigma > 0.0 ? o.sigma : default_sigma(o.filter),
                                  o.window > 0.0 ? std::optional<double>(o.window) : std::nullopt};
    MaskTrainingOptions opts;
    opts.epochs = o.epochs;
    opts.lr = o.lr;
    opts.seed = g.seed;
    const std::size_t fidelity = o.fidelity > 0 ? o.fidelity : o.filter * o.filter;
    log.event("config", {{"command", "pretrain-mask"},
                         {"globals", g.to_json()},
                         {"grid", {h, w}},
                         {"filter", o.filter},
                         {"sigma", spec.sigma},
                         {"window", o.window},
                         {"fidelity", fidelity},
                         {"epochs", opts.epochs},
                         {"lr", opts.lr},
                         {"early_stop_mse", opts.early_stop_mse},
                         {"out", o.out}});

    const MaskTrainingResult r = train_mask_weights(spec, fidelity, opts);
    const auto &hist = r.mse_history;
    for (std::size_t i = 0; i < hist.size(); ++i)
        if (i % 50 == 0 || i + 1 == hist.size())
            log.step("mask_step", i, i, hist[i], opts.lr);

    const fs::path out(o.out);
    const fs::path dir = parent_or_cwd(out);
    ensure_directory(dir);
    Manifest man(dir);
    save_mask_pair(out, r.pair);
    man.add(out);

    const fs::path stem = dir / out.stem();
    std::ostringstream csv;
    csv << "epoch,mse\n";
    char line[64];
    for (std::size_t i = 0; i < hist.size(); ++i) {
        std::snprintf(line, sizeof line, "%zu,%.17g\n", i, hist[i]);
        csv << line;
    }
    const fs::path history = stem.string() + "_mse.csv";
    write_text_file(history, csv.str());
    man.add(history);
    add_heatmap(man, export_heatmap(compose_mask(r.pair), stem.string() + "_mask"));
    man.write();
    log.event("summary", {{"initial_mse", r.initial_mse}, {"final_mse", r.final_mse}, {"epochs_run", hist.size() - 1}});
}

void run_train(const Globals &g, Logger &log, const TrainOptions &o) {
    if (o.out.empty())
        throw UsageError("--out is required");
    const TrainConfig cfg = resolve_config(g, o.config, o.epochs, o.fraction);
    const Variant variant = variant_from_string(o.variant);
    log.event("config", {{"command", "train"},
                         {"globals", g.to_json()},
                         {"variant", o.variant},
                         {"train_config", config_json(cfg)},
                         {"data", o.data.to_json()},
                         {"log_every", o.log_every},
                         {"out", o.out}});

    const TrainTestSplit split = o.data.load();
    const LabeledImageSet subset = subset_fraction(split.train, cfg.dataset_fraction, cfg.seed);
    const Matrix &first = split.train.images.at(0);
    Model model = build_model(cfg, variant, first.rows(), first.cols(), class_count(split));
    log.event("model", {{"parameters", model.params.scalar_count()},
                        {"tokens", model.tokens()},
                        {"train_samples", subset.size()},
                        {"test_samples", split.test.size()}});

    const fs::path dir(o.out);
    ensure_directory(dir);
    Manifest man(dir);
    write_text_file(dir / "config.json", config_json(cfg).dump(2) + "\n");
    man.add(dir / "config.json");

    TrainCallbacks cb;
    cb.on_step = [&](const StepLog &s) {
        if (o.log_every > 0 && s.step % o.log_every == 0)
            log.step("train_step", s.step, s.epoch, s.loss, s.lr);
    };
    cb.on_epoch = [&](const Model &m, std::size_t epoch, const TrainingHistory &h, const std::string &rng) {
        const fs::path path = dir / ckpt_name(epoch);
        save_checkpoint(path, ModelCheckpoint{m, epoch, rng, h});
        man.add(path);
        if (epoch == 0)
            return;
        const EpochMetrics &e = h.epochs.back();
        log.step("epoch", 0, epoch, e.train_loss, e.lr,
                 {{"train_acc", e.train_acc}, {"test_acc", e.test_acc}, {"checkpoint", path.filename().string()}});
    };
    const TrainingHistory hist = train(model, subset, split.test, cb);

    std::ostringstream csv;
    csv << "epoch,train_loss,train_acc,test_acc,lr\n";
    char line[160];
    for (const auto &e : hist.epochs) {
        std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g\n", e.epoch, e.train_loss, e.train_acc,
                      e.test_acc, e.lr);
        csv << line;
    }
    write_text_file(dir / "metrics.csv", csv.str());
    man.add(dir / "metrics.csv");
    man.write();
    const EpochMetrics &last = hist.epochs.back();
    log.event("summary", {{"epochs", hist.epochs.size()}, {"train_acc", last.train_acc}, {"test_acc", last.test_acc}});
}

void run_eval(const Globals &g, Logger &log, const EvalOptions &o) {
    if (o.split != "test" && o.split != "train")
        throw UsageError("--split must be test or train");
    ModelCheckpoint ckpt = load_checkpoint(o.ckpt);
    if (g.precision_given)
        ckpt.model.config.precision = g.resolved_precision();
    log.event("config", {{"command", "eval"},
                         {"globals", g.to_json()},
                         {"ckpt", o.ckpt},
                         {"variant", to_string(ckpt.model.variant)},
                         {"epoch", ckpt.epoch},
                         {"train_config", config_json(ckpt.model.config)},
                         {"data", o.data.to_json()},
                         {"split", o.split},
                         {"out", o.out}});
    const TrainTestSplit split = o.data.load();
    const LabeledImageSet &set = o.split == "test" ? split.test : split.train;
    check_image_shape(ckpt.model, set.images.at(0));
    const double acc = evaluate(ckpt.model, set);
    log.event("summary", {{"accuracy", acc}, {"samples", set.size()}});
    if (!o.out.empty()) {
        ensure_directory(o.out);
        Manifest man(o.out);
        const fs::path report = fs::path(o.out) / "eval.json";
        write_text_file(report, json{{"ckpt_sha256", sha256_file(o.ckpt)},
                                     {"split", o.split},
                                     {"samples", set.size()},
                                     {"accuracy", acc}}
                                    .dump(2) +
                                    "\n");
        man.add(report);
        man.write();
    }
}

void run_explain(const Globals &g, Logger &log, const ExplainOptions &o) {
    if (o.out.empty())
        throw UsageError("--out is required");
    if (o.image.empty() == (o.index < 0))
        throw UsageError("exactly one of --image or --index is required");
    ModelCheckpoint ckpt = load_checkpoint(o.ckpt);
    if (g.precision_given)
        ckpt.model.config.precision = g.resolved_precision();
    log.event("config", {{"command", "explain"},
                         {"globals", g.to_json()},
                         {"ckpt", o.ckpt},
                         {"image", o.image},
                         {"index", o.index},
                         {"data", o.data.to_json()},
                         {"out", o.out}});

    Matrix image;
    json extra = json::object();
    if (!o.image.empty()) {
        image = read_pgm(o.image);
    } else {
        const LabeledImageSet test = o.data.load().test;
        if (static_cast<std::size_t>(o.index) >= test.size())
            throw IndexError("--index " + std::to_string(o.index) + " out of range for " +
                             std::to_string(test.size()) + " test images");
        image = test.images[static_cast<std::size_t>(o.index)];
        extra["label"] = test.labels[static_cast<std::size_t>(o.index)];
    }
    check_image_shape(ckpt.model, image);
    const RolloutMap map = model_rollout(ckpt.model, image);
    const int predicted = predict(ckpt.model, std::span<const Matrix>(&image, 1)).front();

    const fs::path dir(o.out);
    ensure_directory(dir);
    Manifest man(dir);
    add_heatmap(man, export_heatmap(image, dir / "input"));
    add_heatmap(man, export_heatmap(map.values, dir / "rollout"));
    json report = {{"predicted", predicted}, {"grid", {map.geom.height(), map.geom.width()}}};
    for (const auto &[k, v] : extra.items())
        report[k] = v;
    write_text_file(dir / "explain.json", report.dump(2) + "\n");
    man.add(dir / "explain.json");
    man.write();
    log.event("summary", report);
}

void run_masks(const Globals &g, Logger &log, const MasksOptions &o) {
    if (o.out.empty())
        throw UsageError("--out is required");
    if (!fs::is_directory(o.ckpt_dir))
        throw UsageError("--ckpt-dir " + o.ckpt_dir + " is not a directory");
    std::vector<fs::path> files;
    for (const auto &entry : fs::directory_iterator(o.ckpt_dir)) {
        const std::string name = entry.path().filename().string();
        if (name.starts_with("ckpt_epoch") && entry.path().extension() == ".ibck")
            files.push_back(entry.path());
    }
    if (files.empty())
        throw UsageError("no ckpt_epoch*.ibck files in " + o.ckpt_dir);
    std::sort(files.begin(), files.end());
    log.event("config", {{"command", "masks"},
                         {"globals", g.to_json()},
                         {"ckpt_dir", o.ckpt_dir},
                         {"checkpoints", files.size()},
                         {"layer", o.layer},
                         {"head", o.head},
                         {"out", o.out}});

    std::vector<ModelCheckpoint> snaps;
    for (const auto &f : files)
        snaps.push_back(load_checkpoint(f));
    const fs::path dir(o.out);
    ensure_directory(dir);
    Manifest man(dir);
    const std::string prefix = "mask_l" + std::to_string(o.layer) + "_h" + std::to_string(o.head);
    for (const auto &f : export_mask_evolution(snaps, o.layer, o.head, dir / prefix))
        add_heatmap(man, f);
    man.write();
    log.event("summary", {{"exported", snaps.size()}, {"prefix", prefix}});
}

void run_bench_scaling(const Globals &g, Logger &log, const ScalingOptions &o) {
    if (o.out.empty())
        throw UsageError("--out is required");
    ScalingPlan plan;
    plan.base = resolve_config(g, o.config, o.epochs, 0.0);
    plan.fractions = o.fractions;
    for (const auto &v : o.variants)
        plan.variants.push_back(variant_from_string(v));
    plan.seeds = o.seeds.empty() ? std::vector<std::uint64_t>{plan.base.seed} : o.seeds;
    log.event("config", {{"command", "bench-scaling"},
                         {"globals", g.to_json()},
                         {"train_config", config_json(plan.base)},
                         {"data", o.data.to_json()},
                         {"fractions", o.fractions},
                         {"variants", o.variants},
                         {"seeds", plan.seeds},
                         {"out", o.out}});

    const TrainTestSplit split = o.data.load();
    TrainCallbacks cb;
    cb.on_step = [&](const StepLog &s) {
        if (s.step % 50 == 0)
            log.step("train_step", s.step, s.epoch, s.loss, s.lr);
    };
    const auto rows = run_scaling(
        split, plan,
        [&](const ScalingRow &r) {
            log.event("result", {{"variant", to_string(r.variant)},
                                 {"fraction", r.fraction},
                                 {"seed", r.seed},
                                 {"epoch", r.epoch},
                                 {"train_acc", r.train_acc},
                                 {"test_acc", r.test_acc}});
        },
        cb);

    const fs::path out(o.out);
    const fs::path dir = parent_or_cwd(out);
    ensure_directory(dir);
    Manifest man(dir);
    std::ostringstream csv;
    write_scaling_csv(csv, rows);
    write_text_file(out, csv.str());
    man.add(out);
    man.write();
    for (double f : plan.fractions)
        for (Variant v : plan.variants)
            log.event("summary", {{"variant", to_string(v)},
                                  {"fraction", f},
                                  {"mean_final_test_acc", mean_final_test_acc(rows, v, f)}});
}

} // namespace ibit::cli
