#include <iostream>

#include "CLI11.hpp"

#include "cli_support.hpp"
#include "commands.hpp"
#include "ibit/errors.hpp"
#include "ibit/kernels.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

void add_data_options(CLI::App *sub, ibit::cli::DataOptions &d) {
    sub->add_option("--data", d.source, "IDX directory or 'synth'")->capture_default_str();
    sub->add_option("--synth-train", d.synth_train, "Synthetic training images")->capture_default_str();
    sub->add_option("--synth-test", d.synth_test, "Synthetic test images")->capture_default_str();
    sub->add_option("--image-size", d.image_size, "Synthetic image side")->capture_default_str();
    sub->add_option("--data-seed", d.data_seed, "Synthetic data seed")->capture_default_str();
}

} // namespace

int main(int argc, char **argv) {
    using namespace ibit::cli;
    CLI::App app{"Convolution-as-attention tools: equivalence checks, mask pretraining, training and explanations"};
    app.require_subcommand(1);
    app.fallthrough();

    Globals g;
    auto *seed_opt = app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
    app.add_option("--threads", g.threads, "Worker threads (0 keeps the OpenMP default)")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    auto *prec_opt = app.add_option("--precision", g.precision, "Arithmetic precision")
                         ->check(CLI::IsMember({"f32", "f64"}))
                         ->capture_default_str();
    app.add_option("--log", g.log, "Log format")->check(CLI::IsMember({"text", "json"}))->capture_default_str();

    VerifyOptions verify;
    auto *c_verify = app.add_subcommand("verify-equivalence", "Check convolution against its attention form");
    c_verify->add_option("--max-grid", verify.max_grid, "Largest grid side")->capture_default_str();
    c_verify->add_option("--filters", verify.filters, "Filter sizes")->delimiter(',')->capture_default_str();
    c_verify->add_option("--trials", verify.trials, "Random cases")->capture_default_str();
    c_verify->add_option("--tolerance", verify.tolerance, "Max absolute error")->capture_default_str();
    c_verify->add_option("--out", verify.out, "Directory for the CSV report");

    PretrainOptions pre;
    auto *c_pre = app.add_subcommand("pretrain-mask", "Fit sub-mask factors to a Gaussian attention target");
    c_pre->add_option("--grid", pre.grid, "Token grid as HxW")->required();
    c_pre->add_option("--filter", pre.filter, "Emulated filter size")->capture_default_str();
    c_pre->add_option("--sigma", pre.sigma, "Gaussian width (default filter/2)");
    c_pre->add_option("--fidelity", pre.fidelity, "Factor rank (default filter^2)");
    c_pre->add_option("--epochs", pre.epochs, "Gradient steps")->capture_default_str();
    c_pre->add_option("--lr", pre.lr, "Learning rate")->capture_default_str();
    c_pre->add_option("--window", pre.window, "Zero target entries beyond this grid distance");
    c_pre->add_option("--out", pre.out, "Output IBMK file")->required();

    TrainOptions tr;
    auto *c_train = app.add_subcommand("train", "Train a model and checkpoint every epoch");
    c_train->add_option("--config", tr.config, "JSON training config");
    c_train->add_option("--variant", tr.variant, "Model variant")
        ->check(CLI::IsMember({"ibit", "baseline"}))
        ->capture_default_str();
    add_data_options(c_train, tr.data);
    c_train->add_option("--fraction", tr.fraction, "Training-set fraction in (0, 1]");
    c_train->add_option("--epochs", tr.epochs, "Override the config epoch count");
    c_train->add_option("--log-every", tr.log_every, "Steps between step log lines")->capture_default_str();
    c_train->add_option("--out", tr.out, "Output directory")->required();

    EvalOptions ev;
    auto *c_eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    c_eval->add_option("--ckpt", ev.ckpt, "IBCK checkpoint")->required()->check(CLI::ExistingFile);
    add_data_options(c_eval, ev.data);
    c_eval->add_option("--split", ev.split, "Split to score")->check(CLI::IsMember({"test", "train"}))->capture_default_str();
    c_eval->add_option("--out", ev.out, "Directory for eval.json");

    ExplainOptions ex;
    auto *c_explain = app.add_subcommand("explain", "Attention rollout for one image");
    c_explain->add_option("--ckpt", ex.ckpt, "IBCK checkpoint")->required()->check(CLI::ExistingFile);
    auto *img_opt = c_explain->add_option("--image", ex.image, "P5 PGM image")->check(CLI::ExistingFile);
    auto *idx_opt = c_explain->add_option("--index", ex.index, "Test-set index")->check(CLI::NonNegativeNumber);
    img_opt->excludes(idx_opt);
    add_data_options(c_explain, ex.data);
    c_explain->add_option("--out", ex.out, "Output directory")->required();

    MasksOptions mk;
    auto *c_masks = app.add_subcommand("masks", "Export a mask's evolution across checkpoints");
    c_masks->add_option("--ckpt-dir", mk.ckpt_dir, "Directory of ckpt_epochNNN.ibck files")->required();
    c_masks->add_option("--layer", mk.layer, "Layer index")->capture_default_str();
    c_masks->add_option("--head", mk.head, "Head index")->capture_default_str();
    c_masks->add_option("--out", mk.out, "Output directory")->required();

    ScalingOptions sc;
    auto *c_scale = app.add_subcommand("bench-scaling", "Accuracy against training-set fraction per variant");
    c_scale->add_option("--config", sc.config, "JSON training config");
    add_data_options(c_scale, sc.data);
    c_scale->add_option("--fractions", sc.fractions, "Training fractions")->delimiter(',')->capture_default_str();
    c_scale->add_option("--variants", sc.variants, "Variants")
        ->delimiter(',')
        ->check(CLI::IsMember({"ibit", "baseline"}))
        ->capture_default_str();
    c_scale->add_option("--seeds", sc.seeds, "Seeds (default: --seed)")->delimiter(',');
    c_scale->add_option("--epochs", sc.epochs, "Override the config epoch count");
    c_scale->add_option("--out", sc.out, "Output CSV")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }
    g.seed_given = seed_opt->count() > 0;
    g.precision_given = prec_opt->count() > 0;
    if (g.threads > 0)
        ibit::kernels::set_num_threads(g.threads);

    Logger log(g.log == "json" ? LogFormat::json : LogFormat::text, std::cout);
    try {
        if (c_verify->parsed())
            run_verify_equivalence(g, log, verify);
        else if (c_pre->parsed())
            run_pretrain_mask(g, log, pre);
        else if (c_train->parsed())
            run_train(g, log, tr);
        else if (c_eval->parsed())
            run_eval(g, log, ev);
        else if (c_explain->parsed())
            run_explain(g, log, ex);
        else if (c_masks->parsed())
            run_masks(g, log, mk);
        else if (c_scale->parsed())
            run_bench_scaling(g, log, sc);
    } catch (const UsageError &e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const ibit::ConfigError &e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const ibit::IndexError &e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitOk;
}
