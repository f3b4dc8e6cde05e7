#include "ibit/experiment.hpp"

#include <cstdio>
#include <ostream>

#include "ibit/errors.hpp"

namespace ibit {

TrainTestSplit synth_split(const SynthSpec &spec) {
    // Odd and even seeds keep the two draws apart for any base seed.
    return {synth_shapes(spec.train_size, spec.image_size, 2 * spec.seed),
            synth_shapes(spec.test_size, spec.image_size, 2 * spec.seed + 1)};
}

std::vector<ScalingRow> run_scaling(const TrainTestSplit &data, const ScalingPlan &plan,
                                    const std::function<void(const ScalingRow &)> &on_row,
                                    const TrainCallbacks &callbacks) {
    if (plan.fractions.empty() || plan.variants.empty() || plan.seeds.empty())
        throw ConfigError("scaling: fractions, variants and seeds must be non-empty");
    data.train.validate();
    data.test.validate();
    if (data.test.empty())
        throw ConfigError("scaling: empty test set");
    const std::size_t h = data.train.images.at(0).rows();
    const std::size_t w = data.train.images.at(0).cols();
    std::vector<ScalingRow> rows;
    for (double fraction : plan.fractions) {
        for (std::uint64_t seed : plan.seeds) {
            const LabeledImageSet subset = subset_fraction(data.train, fraction, seed);
            for (Variant variant : plan.variants) {
                TrainConfig cfg = plan.base;
                cfg.seed = seed;
                cfg.dataset_fraction = fraction;
                Model model = build_model(cfg, variant, h, w, data.train.num_classes);
                const TrainingHistory hist = train(model, subset, data.test, callbacks);
                for (const auto &e : hist.epochs) {
                    rows.push_back({variant, fraction, seed, e.epoch, e.train_acc, e.test_acc});
                    if (on_row)
                        on_row(rows.back());
                }
            }
        }
    }
    return rows;
}

void write_scaling_csv(std::ostream &os, const std::vector<ScalingRow> &rows) {
    os << "variant,fraction,seed,epoch,train_acc,test_acc\n";
    char buf[160];
    for (const auto &r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%.17g,%llu,%zu,%.17g,%.17g\n", to_string(r.variant).c_str(), r.fraction,
                      static_cast<unsigned long long>(r.seed), r.epoch, r.train_acc, r.test_acc);
        os << buf;
    }
}

double mean_final_test_acc(const std::vector<ScalingRow> &rows, Variant variant, double fraction) {
    // The last row of each seed is its final epoch.
    std::vector<std::pair<std::uint64_t, double>> last;
    for (const auto &r : rows) {
        if (r.variant != variant || r.fraction != fraction)
            continue;
        if (!last.empty() && last.back().first == r.seed)
            last.back().second = r.test_acc;
        else
            last.emplace_back(r.seed, r.test_acc);
    }
    if (last.empty())
        throw ConfigError("scaling: no rows for " + to_string(variant) + " at the requested fraction");
    double s = 0.0;
    for (const auto &p : last)
        s += p.second;
    return s / static_cast<double>(last.size());
}

} // namespace ibit
