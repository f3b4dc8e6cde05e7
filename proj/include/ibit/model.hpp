#ifndef IBIT_MODEL_HPP_
#define IBIT_MODEL_HPP_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ibit/convattn.hpp"
#include "ibit/data.hpp"
#include "ibit/lmsa.hpp"
#include "ibit/matrix.hpp"
#include "ibit/tape.hpp"

namespace ibit {

enum class Variant { ibit, baseline };

std::string to_string(Variant v);
Variant variant_from_string(const std::string &s);

// How the inductive masks start before joint training.
enum class MaskInit {
    pretrained, // gradient descent onto the rolled Gaussian target
    ones        // exact all-ones product (reduces LMSA to plain attention)
};

struct TrainConfig {
    std::size_t layers = 4;
    std::size_t heads = 3;
    std::size_t d_model = 96;
    std::size_t mlp_ratio = 4;
    std::size_t patch_size = 4;
    double lr = 5e-4;
    double weight_decay = 0.005;
    double label_smoothing = 0.1;
    double drop_path = 0.0;
    std::string schedule = "cosine-warmup";
    double warmup_fraction = 0.05;
    std::size_t epochs = 5;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
    double dataset_fraction = 1.0;

    // Random crop after zero padding by this many pixels; 0 disables.
    std::size_t crop_padding = 0;
    bool hflip = false;

    // Inductive-mask settings (ibit variant only).
    std::size_t mask_filter = 3;
    double mask_sigma = 1.5;
    std::size_t mask_epochs = 2000;
    double mask_lr = 0.1;
    bool shared_mask = false;
    bool freeze_masks = false;
    MaskInit mask_init = MaskInit::pretrained;
    AttentionNorm attention_norm = AttentionNorm::row_l1;

    Precision precision = Precision::f64;

    void validate() const;

    // 12 layers, 3 heads, d_model 192 with full-scale optimizer settings.
    static TrainConfig reference_scale();
};

// JSON object with TrainConfig field names.
std::string config_to_json(const TrainConfig &c);
TrainConfig config_from_json(const std::string &text);

// Ordered, named parameter matrices.
class ParameterStore {
  public:
    Matrix &add(const std::string &name, Matrix value);
    Matrix &at(const std::string &name);
    const Matrix &at(const std::string &name) const;
    bool contains(const std::string &name) const;
    std::size_t size() const noexcept { return entries_.size(); }
    std::size_t scalar_count() const noexcept;

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    friend bool operator==(const ParameterStore &, const ParameterStore &) = default;

  private:
    std::vector<std::pair<std::string, Matrix>> entries_;
};

struct Model {
    TrainConfig config;
    Variant variant = Variant::ibit;
    std::size_t image_height = 0;
    std::size_t image_width = 0;
    std::size_t num_classes = 0;
    ParameterStore params;

    GridGeometry grid() const;
    std::size_t tokens() const { return grid().seq_len() + 1; }
    static std::string mask_name(std::size_t layer, std::size_t head, char factor);
    // The pair for (layer, head), honoring shared_mask.
    SubMaskPair mask_pair(std::size_t layer, std::size_t head) const;
};

// Parameters initialized from config.seed. Non-mask weights are drawn from a
// stream independent of the mask pretraining, so both variants built with one
// seed share them bitwise.
Model build_model(const TrainConfig &config, Variant variant, std::size_t image_height, std::size_t image_width,
                  std::size_t num_classes);

// Output of one forward pass over a batch.
struct ForwardPass {
    Var logits;
    std::vector<std::shared_ptr<const AttentionTrace>> traces;
    // Parameter leaves on the tape, aligned with Model::params order.
    std::vector<Var> param_vars;
};

struct ForwardOptions {
    bool training = false;         // enables drop path
    std::mt19937_64 *rng = nullptr; // drop-path draws; required when training with drop_path > 0
    bool params_require_grad = false;
};

// Images are image_height x image_width; returns logits (batch x classes).
ForwardPass model_forward(Tape &tape, const Model &model, std::span<const Matrix> images,
                          const ForwardOptions &opts = {});

// (batch * patches) x (patch_size^2) matrix of row-major patch pixels.
Matrix extract_patches(std::span<const Matrix> images, std::size_t patch_size);

struct EpochMetrics {
    std::size_t epoch = 0; // 1-based
    double train_loss = 0.0;
    double train_acc = 0.0;
    double test_acc = 0.0;
    double lr = 0.0; // at the last step of the epoch
    double wallclock = 0.0;
};

struct TrainingHistory {
    std::vector<EpochMetrics> epochs;
};

struct StepLog {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double loss = 0.0;
    double lr = 0.0;
    double wallclock = 0.0;
};

struct TrainCallbacks {
    std::function<void(const StepLog &)> on_step;
    // Called with epoch 0 before training, then after each epoch.
    std::function<void(const Model &, std::size_t epoch, const TrainingHistory &, const std::string &rng_state)>
        on_epoch;
};

// Linear warmup from 0 over the first warmup_fraction of steps, then cosine
// decay reaching 0 at the final step.
double cosine_warmup_lr(std::size_t step, std::size_t total_steps, double peak, double warmup_fraction);

struct AdamWState {
    std::vector<Matrix> m;
    std::vector<Matrix> v;
    std::size_t t = 0;
};

// One AdamW step with decoupled weight decay on parameters named *.weight or
// *.w_*; skips frozen names.
void adamw_step(ParameterStore &params, std::span<const Matrix> grads, AdamWState &state, double lr,
                double weight_decay, const std::function<bool(const std::string &)> &frozen);

// Minibatch training with label-smoothed cross entropy. Throws TrainingError
// naming the step (and the first non-finite parameter gradient) on a
// non-finite loss. test_set may be empty.
TrainingHistory train(Model &model, const LabeledImageSet &train_set, const LabeledImageSet &test_set,
                      const TrainCallbacks &callbacks = {});

// Top-1 accuracy; throws on an empty dataset.
double evaluate(const Model &model, const LabeledImageSet &data, std::size_t batch_size = 100);
std::vector<int> predict(const Model &model, std::span<const Matrix> images, std::size_t batch_size = 100);

// "IBCK" checkpoint: magic, version u32, u32 length + UTF-8 JSON header
// (config, variant, shapes, epoch, rng_state, metrics), then named parameter
// blobs (u32 name length, name, u32 rows, u32 cols, little-endian f64 data)
// until end of file.
struct ModelCheckpoint {
    Model model;
    std::size_t epoch = 0;
    std::string rng_state;
    TrainingHistory history;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;
void write_checkpoint(std::ostream &os, const ModelCheckpoint &ckpt);
ModelCheckpoint read_checkpoint(std::istream &is);
void save_checkpoint(const std::filesystem::path &path, const ModelCheckpoint &ckpt);
ModelCheckpoint load_checkpoint(const std::filesystem::path &path);

} // namespace ibit

#endif // IBIT_MODEL_HPP_
