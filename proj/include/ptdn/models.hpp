#pragma once

// End-to-end polar models: Cartesian in, Cartesian out.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "ptdn/attention.hpp"
#include "ptdn/conv_stack.hpp"
#include "ptdn/polar_map.hpp"

namespace ptdn {

enum class ModelKind { polar_cnn, polar_transformer };
std::string to_string(ModelKind k);
ModelKind model_kind_from_string(const std::string& s);

/// Defaults are the reference architecture (25-layer CNN; 5/17/9 transformer stages).
struct ModelConfig {
    ModelKind kind = ModelKind::polar_cnn;
    std::size_t L = 64;
    std::size_t N = 0;         // 0: L
    std::size_t M = 0;         // 0: 4L
    double delta = 0.0;        // 0: 1/L
    double bandwidth = 0.0;    // 0: 1/L
    // polar CNN
    std::size_t depth = 25;
    std::size_t channels = 8;
    // polar transformer
    std::size_t pre_depth = 5;
    std::size_t attn_depth = 17;
    std::size_t post_depth = 9;
    std::size_t pre_channels = 8;
    std::size_t attn_channels = 16;
    std::size_t post_channels = 8;
    std::size_t attention_blocks = 1;
    bool share_block_weights = true;  // only matters when attention_blocks > 1
    std::size_t K = 8;                // nominal set size; runtime sets may differ
    // all stages
    std::size_t Q = 5;
    std::size_t W = 5;
    std::size_t groups = 4;

    /// Throws std::invalid_argument on zero counts or channels not divisible by groups.
    void validate() const;
    [[nodiscard]] GridParams grid_params() const;
};

nlohmann::json to_json(const ModelConfig& c);
/// Unknown keys are rejected; missing keys keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);

template <typename T>
struct ModelTape {
    std::vector<typename ConvStack<T>::Tape> first, last;      // cnn or pre; post
    std::vector<AttentionTape<T>> attention;  // one per block
};

template <typename T>
class PolarModel {
public:
    explicit PolarModel(const ModelConfig& config);

    [[nodiscard]] const ModelConfig& config() const { return config_; }
    [[nodiscard]] const PolarGrid& grid() const { return *grid_; }

    void initialize(std::uint64_t seed);
    /// Sets every parameter to zero (gradient accumulators).
    void zero();

    /// Polar CNN: each image independently. Transformer: the images form one set.
    std::vector<CartesianImage<T>> forward(const std::vector<CartesianImage<T>>& xs, ModelTape<T>* tape = nullptr) const;
    /// Accumulates parameter gradients of <upstream, forward(xs)> into grads.
    void backward(const ModelTape<T>& tape, const std::vector<CartesianImage<T>>& upstream, PolarModel& grads) const;

    /// Attention coefficients of the last block for a set; transformer only.
    AttentionCoefficients<T> attention(const std::vector<CartesianImage<T>>& xs) const;

    void collect(std::vector<ParamRef<T>>& out);
    [[nodiscard]] std::size_t parameter_count() const;

    /// Shared key/query net of block b.
    [[nodiscard]] const ConvStack<T>& key_query(std::size_t b = 0) const { return kq_[config_.share_block_weights ? 0 : b]; }

private:
    ConvStack<T>& kq_mut(std::size_t b) { return kq_[config_.share_block_weights ? 0 : b]; }
    PolarImageSet<T> encode(const std::vector<CartesianImage<T>>& xs) const;

    ModelConfig config_;
    std::shared_ptr<const PolarGrid> grid_;
    ConvStack<T> first_;             // CNN body, or transformer pre-CNN
    std::vector<ConvStack<T>> kq_;   // transformer key/query nets
    ConvStack<T> last_;              // transformer post-CNN
};

template <typename T>
CartesianImage<T> forward_single(const PolarModel<T>& model, const CartesianImage<T>& x);
template <typename T>
std::vector<CartesianImage<T>> forward_set(const PolarModel<T>& model, const std::vector<CartesianImage<T>>& xs);

class WeightsError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Container: 8-byte little-endian manifest length, JSON manifest (config and tensor
/// names/shapes), then one PTNS tensor per parameter in manifest order.
template <typename T>
void save_weights(PolarModel<T>& model, const std::filesystem::path& path);
template <typename T>
PolarModel<T> load_weights(const std::filesystem::path& path);
/// Reads only the manifest's config.
ModelConfig read_weights_config(const std::filesystem::path& path);

}  // namespace ptdn
