#ifndef IBIT_TOOLS_COMMANDS_HPP_
#define IBIT_TOOLS_COMMANDS_HPP_

#include <string>
#include <vector>

#include "cli_support.hpp"

namespace ibit::cli {

struct VerifyOptions {
    std::size_t max_grid = 8;
    std::vector<std::size_t> filters = {1, 2, 3};
    std::size_t trials = 100;
    double tolerance = 1e-10;
    std::string out;
};

struct PretrainOptions {
    std::string grid;
    std::size_t filter = 3;
    double sigma = 0.0; // 0 selects filter / 2
    std::size_t fidelity = 0; // 0 selects filter^2
    std::size_t epochs = 2000;
    double lr = 0.1;
    double window = 0.0; // 0 disables
    std::string out;
};

struct TrainOptions {
    std::string config;
    std::string variant = "ibit";
    DataOptions data;
    double fraction = 0.0; // 0 keeps the config value
    std::size_t epochs = 0; // 0 keeps the config value
    std::size_t log_every = 10;
    std::string out;
};

struct EvalOptions {
    std::string ckpt;
    DataOptions data;
    std::string split = "test";
    std::string out;
};

struct ExplainOptions {
    std::string ckpt;
    std::string image;
    long long index = -1;
    DataOptions data;
    std::string out;
};

struct MasksOptions {
    std::string ckpt_dir;
    std::size_t layer = 0;
    std::size_t head = 0;
    std::string out;
};

struct ScalingOptions {
    std::string config;
    DataOptions data;
    std::vector<double> fractions = {0.05, 0.25, 1.0};
    std::vector<std::string> variants = {"ibit", "baseline"};
    std::vector<std::uint64_t> seeds;
    std::size_t epochs = 0;
    std::string out = "results.csv";
};

// Each returns normally on success and throws on failure.
void run_verify_equivalence(const Globals &g, Logger &log, const VerifyOptions &o);
void run_pretrain_mask(const Globals &g, Logger &log, const PretrainOptions &o);
void run_train(const Globals &g, Logger &log, const TrainOptions &o);
void run_eval(const Globals &g, Logger &log, const EvalOptions &o);
void run_explain(const Globals &g, Logger &log, const ExplainOptions &o);
void run_masks(const Globals &g, Logger &log, const MasksOptions &o);
void run_bench_scaling(const Globals &g, Logger &log, const ScalingOptions &o);

} // namespace ibit::cli

#endif // IBIT_TOOLS_COMMANDS_HPP_
