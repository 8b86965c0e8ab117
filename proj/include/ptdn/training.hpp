#pragma once

// MSE training with Adam, relative-MSE evaluation and gradient checks.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ptdn/models.hpp"
#include "ptdn/simdata.hpp"

namespace ptdn {

template <typename T>
struct LossAndGradient {
    double loss = 0.0;
    std::vector<CartesianImage<T>> gradient;  // d loss / d prediction
};

/// Mean over all pixels of all images of (pred - target)^2; gradient 2 (pred - target) / count.
template <typename T>
LossAndGradient<T> mse_loss(const std::vector<CartesianImage<T>>& pred, const std::vector<CartesianImage<T>>& target);

/// sum ||pred - target||^2 / sum ||target||^2 over the whole set, or with per_image the mean of
/// the per-image ratios. Throws std::invalid_argument on empty input or all-zero targets.
template <typename T, typename U>
double relative_mse(const std::vector<CartesianImage<T>>& pred, const std::vector<CartesianImage<U>>& target,
                    bool per_image = false);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::size_t step = 0;
    std::vector<std::vector<double>> m, v;
};

/// One bias-corrected Adam update of params from grads (same tensor order and shapes).
template <typename T>
void adam_step(std::vector<ParamRef<T>>& params, const std::vector<ParamRef<T>>& grads, AdamState& state,
               const AdamConfig& config);

struct TrainConfig {
    AdamConfig adam;
    std::size_t batch_size = 16;
    std::size_t epochs = 10;
    std::uint64_t seed = 0;
    NoiseSpec noise;  // noise.snr is the training SNR
    /// Stop an epoch after this many batches (0: full epoch).
    std::size_t max_batches = 0;

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Unknown keys are rejected; missing keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Experiment configuration file: {"model": {...}, "train": {...}, "noise": {...}}, every
/// section optional, unknown keys rejected at every level. The noise section may also sit
/// inside "train", but not in both places.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    nlohmann::json model_json = nlohmann::json::object();  // as given, to tell set keys from defaults
};
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& c);

struct MetricRecord {
    std::size_t epoch = 0;
    double train_mse = 0.0;
    double eval_rel_mse = 0.0;  // NaN when no evaluation set was given
    double seconds = 0.0;
};

struct MetricLog {
    std::vector<MetricRecord> records;

    void append(const MetricRecord& r);  // epochs must increase
    [[nodiscard]] std::string csv() const;
    void write_csv(const std::filesystem::path& path) const;
};

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Training items: one image per item for the polar CNN (sets are flattened), one whole set
/// per item for the transformer.
std::vector<std::vector<const CartesianImage<double>*>> training_items(const Dataset& data, ModelKind kind);

/// Noisy copy of an item. Noise for item i in epoch e is seeded by (seed, e, i, member).
template <typename T>
std::vector<CartesianImage<T>> noisy_item(const std::vector<const CartesianImage<double>*>& item, const NoiseSpec& noise,
                                          double power, std::uint64_t seed);

/// Seed used for (epoch, item) noise; evaluation uses epoch = UINT64_MAX.
std::uint64_t noise_seed(std::uint64_t seed, std::uint64_t epoch, std::uint64_t item);

/// Relative MSE of the model against clean targets on a fixed noisy copy of the data, and the
/// same for the identity (noisy input as prediction).
struct EvalResult {
    double model = 0.0;
    double identity = 0.0;
    std::size_t images = 0;
};
template <typename T>
EvalResult evaluate(const PolarModel<T>& model, const Dataset& data, const NoiseSpec& noise, std::uint64_t seed,
                    bool per_image = false);

using EpochCallback = std::function<void(const MetricRecord&)>;

/// Fresh noise per epoch, Adam on the Cartesian MSE. Per-item gradients are reduced in item
/// order, so the trajectory does not depend on the thread count.
template <typename T>
MetricLog train(PolarModel<T>& model, const Dataset& train_data, const Dataset* eval_data, const TrainConfig& config,
                const EpochCallback& on_epoch = {});

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::string worst_parameter;
};

/// Central differences of the MSE loss against the analytic gradient on a batch of items,
/// over every parameter or a random subsample of at least min_samples.
GradCheckReport grad_check(PolarModel<double>& model, const std::vector<std::vector<CartesianImage<double>>>& inputs,
                           const std::vector<std::vector<CartesianImage<double>>>& targets, double step = 1e-5,
                           std::size_t min_samples = 200, std::uint64_t seed = 0);

}  // namespace ptdn
