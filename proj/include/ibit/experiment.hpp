#ifndef IBIT_EXPERIMENT_HPP_
#define IBIT_EXPERIMENT_HPP_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

#include "ibit/data.hpp"
#include "ibit/model.hpp"

namespace ibit {

// Synthetic stand-in for an IDX directory: disjoint train and test draws.
struct SynthSpec {
    std::size_t train_size = 2000;
    std::size_t test_size = 500;
    std::size_t image_size = 28;
    std::uint64_t seed = 1;
};

TrainTestSplit synth_split(const SynthSpec &spec);

// One (variant, fraction, seed, epoch) measurement.
struct ScalingRow {
    Variant variant = Variant::ibit;
    double fraction = 1.0;
    std::uint64_t seed = 0;
    std::size_t epoch = 0;
    double train_acc = 0.0;
    double test_acc = 0.0;
};

struct ScalingPlan {
    TrainConfig base;
    std::vector<double> fractions;
    std::vector<Variant> variants;
    std::vector<std::uint64_t> seeds;
};

// Trains every (fraction, seed, variant) combination with the base config.
// For a given fraction and seed both variants see the same stratified subset
// (drawn with that seed) and the same non-mask initialization.
std::vector<ScalingRow> run_scaling(const TrainTestSplit &data, const ScalingPlan &plan,
                                    const std::function<void(const ScalingRow &)> &on_row = {},
                                    const TrainCallbacks &callbacks = {});

// Header "variant,fraction,seed,epoch,train_acc,test_acc".
void write_scaling_csv(std::ostream &os, const std::vector<ScalingRow> &rows);

// Mean final-epoch test accuracy over seeds for one (variant, fraction).
double mean_final_test_acc(const std::vector<ScalingRow> &rows, Variant variant, double fraction);

} // namespace ibit

#endif // IBIT_EXPERIMENT_HPP_
