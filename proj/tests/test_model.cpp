#include <cmath>
#include <limits>
#include <sstream>

#include "doctest.h"
#include "gradcheck.hpp"
#include "helpers.hpp"
#include "ibit/data.hpp"
#include "ibit/errors.hpp"
#include "ibit/model.hpp"

using namespace ibit;

namespace {

// 8x8 images in 2x2 patches: a 4x4 grid, cheap enough for repeated training.
TrainConfig small_config(std::uint64_t seed = 0) {
    TrainConfig c;
    c.layers = 2;
    c.heads = 2;
    c.d_model = 8;
    c.mlp_ratio = 2;
    c.patch_size = 2;
    c.epochs = 2;
    c.batch_size = 8;
    c.mask_epochs = 200;
    c.seed = seed;
    return c;
}

bool same_non_mask_params(const Model &a, const Model &b) {
    std::size_t compared = 0;
    for (const auto &[name, value] : a.params) {
        if (name.find(".attn.mask") != std::string::npos)
            continue;
        if (!(b.params.at(name) == value))
            return false;
        ++compared;
    }
    return compared > 0;
}

} // namespace

TEST_CASE("configuration presets") {
    const TrainConfig ref = TrainConfig::reference_scale();
    CHECK(ref.layers == 12);
    CHECK(ref.heads == 3);
    CHECK(ref.d_model == 192);
    CHECK(ref.lr == 0.001);
    CHECK(ref.weight_decay == 0.005);
    CHECK(ref.label_smoothing == 0.1);

    const TrainConfig desk;
    CHECK(desk.layers == 4);
    CHECK(desk.heads == 3);
    CHECK(desk.d_model == 96);
    CHECK(desk.patch_size == 4);
    CHECK(desk.weight_decay == 0.005);
    CHECK(desk.label_smoothing == 0.1);
    CHECK(desk.drop_path == 0.0);

    TrainConfig mini = desk;
    mini.mask_epochs = 10;
    const Model m = build_model(mini, Variant::ibit, 28, 28, 10);
    CHECK(m.grid().seq_len() == 49);
    CHECK(m.tokens() == 50);
    CHECK(m.params.scalar_count() < 1'000'000);
}

TEST_CASE("config validation") {
    TrainConfig c;
    c.heads = 5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.dataset_fraction = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.dataset_fraction = 1.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.schedule = "step";
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK_THROWS_AS(build_model(small_config(), Variant::ibit, 9, 8, 4), ConfigError);
    CHECK_THROWS_AS(build_model(small_config(), Variant::ibit, 8, 8, 1), ConfigError);
    CHECK_THROWS_AS(variant_from_string("deit"), ConfigError);
    CHECK(variant_from_string(to_string(Variant::baseline)) == Variant::baseline);
}

TEST_CASE("config JSON round trip and strictness") {
    TrainConfig c = small_config(42);
    c.shared_mask = true;
    c.attention_norm = AttentionNorm::frobenius;
    c.precision = Precision::f32;
    c.mask_init = MaskInit::ones;
    const TrainConfig back = config_from_json(config_to_json(c));
    CHECK(config_to_json(back) == config_to_json(c));
    CHECK(back.seed == 42);
    CHECK(back.shared_mask);
    CHECK_THROWS_AS(config_from_json(R"({"layers": 2, "bogus": 1})"), ConfigError);
    CHECK_THROWS_AS(config_from_json(R"({"layers": "two"})"), ConfigError);
    CHECK_THROWS_AS(config_from_json("[1, 2]"), ConfigError);
    CHECK_THROWS_AS(config_from_json("{"), ConfigError);
    CHECK(config_from_json("{}").d_model == TrainConfig{}.d_model);
}

TEST_CASE("variants built from one seed share their non-mask weights") {
    const Model a = build_model(small_config(3), Variant::ibit, 8, 8, 4);
    const Model b = build_model(small_config(3), Variant::baseline, 8, 8, 4);
    CHECK(same_non_mask_params(a, b));
    CHECK(a.params.size() > b.params.size());
    const Model c = build_model(small_config(4), Variant::ibit, 8, 8, 4);
    CHECK(!same_non_mask_params(a, c));
}

TEST_CASE("per-head and shared masks start from the pretrained pair") {
    TrainConfig cfg = small_config();
    const Model m = build_model(cfg, Variant::ibit, 8, 8, 4);
    CHECK(m.mask_pair(0, 0) == m.mask_pair(1, 1));
    CHECK(m.params.contains(Model::mask_name(1, 1, 'b')));
    CHECK_THROWS_AS(m.mask_pair(2, 0), IndexError);
    CHECK_THROWS_AS(m.mask_pair(0, 2), IndexError);
    cfg.shared_mask = true;
    const Model s = build_model(cfg, Variant::ibit, 8, 8, 4);
    CHECK(!s.params.contains(Model::mask_name(0, 1, 'a')));
    CHECK(s.mask_pair(0, 1) == s.mask_pair(0, 0));
    const Model base = build_model(cfg, Variant::baseline, 8, 8, 4);
    CHECK_THROWS_AS(base.mask_pair(0, 0), StateError);
}

TEST_CASE("cosine warmup schedule") {
    const std::size_t total = 200;
    const double peak = 1e-3;
    CHECK(cosine_warmup_lr(0, total, peak, 0.05) == 0.0);
    CHECK(cosine_warmup_lr(10, total, peak, 0.05) == doctest::Approx(peak).epsilon(1e-15));
    CHECK(cosine_warmup_lr(5, total, peak, 0.05) == doctest::Approx(peak / 2).epsilon(1e-15));
    CHECK(cosine_warmup_lr(total - 1, total, peak, 0.05) <= 1e-6 * peak);
    double prev = peak;
    for (std::size_t s = 10; s < total; ++s) {
        const double lr = cosine_warmup_lr(s, total, peak, 0.05);
        CHECK(lr <= prev);
        prev = lr;
    }
}

TEST_CASE("model gradients match finite differences") {
    for (auto variant : {Variant::ibit, Variant::baseline}) {
        const ibit::testing::ModelGradFixture fx(5, variant);
        const auto rep = ibit::testing::check_model_gradients(fx);
        INFO(to_string(variant), " worst parameter ", rep.worst_name);
        CHECK(rep.worst_rel <= 1e-4);
    }
}

TEST_CASE("adamw decays only weight matrices and skips frozen names") {
    ParameterStore p;
    p.add("layer.weight", Matrix(1, 1, 1.0));
    p.add("layer.bias", Matrix(1, 1, 1.0));
    p.add("frozen.weight", Matrix(1, 1, 1.0));
    AdamWState st;
    const std::vector<Matrix> zero(3, Matrix(1, 1));
    adamw_step(p, zero, st, 0.1, 0.5, [](const std::string &n) { return n.rfind("frozen", 0) == 0; });
    CHECK(p.at("layer.weight")[0] == doctest::Approx(0.95));
    CHECK(p.at("layer.bias")[0] == 1.0);
    CHECK(p.at("frozen.weight")[0] == 1.0);
    CHECK_THROWS_AS(adamw_step(p, std::vector<Matrix>(2, Matrix(1, 1)), st, 0.1, 0.5, {}), DimensionError);
}

TEST_CASE("training is deterministic and checkpoints round-trip") {
    const LabeledImageSet train_set = synth_shapes(48, 8, 1);
    const LabeledImageSet test_set = synth_shapes(16, 8, 2);
    auto run = [&](std::vector<ModelCheckpoint> *snapshots) {
        Model m = build_model(small_config(7), Variant::ibit, 8, 8, 4);
        TrainCallbacks cb;
        if (snapshots)
            cb.on_epoch = [&](const Model &model, std::size_t epoch, const TrainingHistory &h, const std::string &rng) {
                snapshots->push_back(ModelCheckpoint{model, epoch, rng, h});
            };
        const TrainingHistory h = train(m, train_set, test_set, cb);
        return std::pair{m, h};
    };
    std::vector<ModelCheckpoint> snaps;
    const auto [m1, h1] = run(&snaps);
    const auto [m2, h2] = run(nullptr);
    REQUIRE(h1.epochs.size() == 2);
    for (std::size_t e = 0; e < 2; ++e) {
        CHECK(h1.epochs[e].train_loss == h2.epochs[e].train_loss);
        CHECK(h1.epochs[e].train_acc == h2.epochs[e].train_acc);
        CHECK(h1.epochs[e].test_acc == h2.epochs[e].test_acc);
        CHECK(h1.epochs[e].lr == h2.epochs[e].lr);
    }
    CHECK(m1.params == m2.params);
    REQUIRE(snaps.size() == 3);
    CHECK(snaps[0].epoch == 0);
    CHECK(snaps[2].model.params == m1.params);

    std::stringstream ss;
    write_checkpoint(ss, snaps[2]);
    CHECK(ss.str().substr(0, 4) == "IBCK");
    const ModelCheckpoint back = read_checkpoint(ss);
    CHECK(back.model.params == m1.params);
    CHECK(back.epoch == 2);
    CHECK(back.rng_state == snaps[2].rng_state);
    CHECK(back.history.epochs.size() == 2);
    CHECK(back.history.epochs[1].test_acc == h1.epochs[1].test_acc);
    CHECK(config_to_json(back.model.config) == config_to_json(m1.config));
    CHECK(evaluate(back.model, test_set) == evaluate(m1, test_set));
    CHECK(predict(back.model, test_set.images) == predict(m1, test_set.images));

    ibit::testing::TempDir dir("ckpt");
    save_checkpoint(dir / "a.ibck", snaps[1]);
    CHECK(load_checkpoint(dir / "a.ibck").model.params == snaps[1].model.params);
}

TEST_CASE("corrupt checkpoints are rejected") {
    Model m = build_model(small_config(), Variant::baseline, 8, 8, 4);
    std::stringstream ss;
    write_checkpoint(ss, ModelCheckpoint{m, 0, "", {}});
    const std::string bytes = ss.str();
    std::stringstream magic("IBCX" + bytes.substr(4));
    CHECK_THROWS_AS(read_checkpoint(magic), FormatError);
    std::stringstream truncated(bytes.substr(0, bytes.size() - 5));
    CHECK_THROWS_AS(read_checkpoint(truncated), FormatError);
    std::stringstream header_only(bytes.substr(0, 40));
    CHECK_THROWS_AS(read_checkpoint(header_only), FormatError);
}

TEST_CASE("frozen all-ones masks follow the baseline trajectory exactly") {
    const LabeledImageSet data = synth_shapes(32, 8, 3);
    TrainConfig cfg = small_config(9);
    cfg.mask_init = MaskInit::ones;
    cfg.freeze_masks = true;
    Model ib = build_model(cfg, Variant::ibit, 8, 8, 4);
    Model base = build_model(cfg, Variant::baseline, 8, 8, 4);
    const TrainingHistory hi = train(ib, data, data);
    const TrainingHistory hb = train(base, data, data);
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        CHECK(hi.epochs[e].train_loss == hb.epochs[e].train_loss);
        CHECK(hi.epochs[e].test_acc == hb.epochs[e].test_acc);
    }
    CHECK(same_non_mask_params(ib, base));
}

TEST_CASE("evaluation") {
    LabeledImageSet balanced;
    balanced.num_classes = 10;
    std::mt19937_64 rng(4);
    for (int i = 0; i < 200; ++i) {
        balanced.images.push_back(Matrix::uniform(8, 8, 0.0, 1.0, rng));
        balanced.labels.push_back(i % 10);
    }
    const Model m = build_model(small_config(), Variant::ibit, 8, 8, 10);
    const double acc = evaluate(m, balanced);
    CHECK(acc >= 0.05);
    CHECK(acc <= 0.15);
    CHECK(evaluate(m, balanced, 7) == acc);
    CHECK_THROWS_AS(evaluate(m, LabeledImageSet{}), ConfigError);
}

TEST_CASE("training failures name the step") {
    Model m = build_model(small_config(), Variant::ibit, 8, 8, 4);
    m.params.at("head.weight")[0] = std::numeric_limits<double>::quiet_NaN();
    try {
        train(m, synth_shapes(8, 8, 1), {});
        FAIL("expected TrainingError");
    } catch (const TrainingError &e) {
        CHECK(e.step() == 0);
        CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
    Model ok = build_model(small_config(), Variant::ibit, 8, 8, 4);
    LabeledImageSet wide = synth_shapes(8, 8, 1);
    wide.labels[0] = 7;
    wide.num_classes = 8;
    CHECK_THROWS_AS(train(ok, wide, {}), ConfigError);
    CHECK_THROWS_AS(train(ok, LabeledImageSet{}, {}), ConfigError);
}

TEST_CASE("f32 training stays close to f64") {
    const LabeledImageSet data = synth_shapes(16, 8, 5);
    TrainConfig cfg = small_config(2);
    cfg.epochs = 1;
    Model a = build_model(cfg, Variant::ibit, 8, 8, 4);
    cfg.precision = Precision::f32;
    Model b = build_model(cfg, Variant::ibit, 8, 8, 4);
    const auto ha = train(a, data, {});
    const auto hb = train(b, data, {});
    CHECK(ha.epochs[0].train_loss == doctest::Approx(hb.epochs[0].train_loss).epsilon(1e-4));
    CHECK(ha.epochs[0].train_loss != hb.epochs[0].train_loss);
}
