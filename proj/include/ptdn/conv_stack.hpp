#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ptdn/layers.hpp"

namespace ptdn {

struct ConvStackSpec {
    std::size_t in_channels = 1;
    std::size_t hidden_channels = 8;
    std::size_t out_channels = 8;
    std::size_t depth = 1;
    std::size_t N = 0;
    std::size_t Q = 1;
    std::size_t W = 1;
    std::size_t groups = 4;
    /// Whether the last conv is followed by group norm and ReLU like the others.
    bool final_activation = true;

    [[nodiscard]] std::size_t layer_in(std::size_t i) const { return i == 0 ? in_channels : hidden_channels; }
    [[nodiscard]] std::size_t layer_out(std::size_t i) const { return i + 1 == depth ? out_channels : hidden_channels; }
    [[nodiscard]] bool layer_activated(std::size_t i) const { return i + 1 < depth || final_activation; }
};

/// Mutable view of one parameter tensor.
template <typename T>
struct ParamRef {
    std::string name;
    std::vector<std::size_t> shape;
    std::span<T> values;
};

/// A plain stack of [angular_conv -> group_norm -> relu] layers. The same type
/// doubles as its own gradient accumulator.
template <typename T>
class ConvStack {
public:
    struct Layer {
        AngularFilter<T> filter;
        bool activated = true;
        GroupNormParams<T> norm;
    };

    /// Values saved by forward for backward.
    struct Tape {
        std::vector<PolarImage<T>> inputs;
        std::vector<PolarImage<T>> conv_out;
        std::vector<PolarImage<T>> norm_out;
        std::vector<GroupNormCache> norm_cache;
    };

    ConvStack() = default;
    explicit ConvStack(const ConvStackSpec& spec);

    [[nodiscard]] const ConvStackSpec& spec() const { return spec_; }
    [[nodiscard]] std::vector<Layer>& layers() { return layers_; }
    [[nodiscard]] const std::vector<Layer>& layers() const { return layers_; }

    void initialize(std::mt19937_64& rng);
    void zero();

    PolarImage<T> forward(const PolarImage<T>& z, Tape* tape = nullptr) const;
    /// Accumulates parameter gradients into grads and returns the input gradient.
    PolarImage<T> backward(const Tape& tape, const PolarImage<T>& upstream, ConvStack& grads) const;

    /// Parameters in a fixed order; names are prefixed.
    void collect(const std::string& prefix, std::vector<ParamRef<T>>& out);
    [[nodiscard]] std::size_t parameter_count() const;

private:
    ConvStackSpec spec_;
    std::vector<Layer> layers_;
};

}  // namespace ptdn
