#include "ptdn/conv_stack.hpp"

#include <stdexcept>

namespace ptdn {

template <typename T>
ConvStack<T>::ConvStack(const ConvStackSpec& spec) : spec_(spec) {
    if (spec.depth == 0) throw std::invalid_argument("ConvStack: depth must be >= 1");
    if (spec.N == 0) throw std::invalid_argument("ConvStack: N must be >= 1");
    if (spec.in_channels == 0 || spec.hidden_channels == 0 || spec.out_channels == 0)
        throw std::invalid_argument("ConvStack: channel counts must be positive");
    layers_.reserve(spec.depth);
    for (std::size_t i = 0; i < spec.depth; ++i) {
        Layer layer;
        const std::size_t cout = spec.layer_out(i);
        layer.filter = AngularFilter<T>(cout, spec.layer_in(i), spec.N, spec.Q, spec.W);
        layer.activated = spec.layer_activated(i);
        if (layer.activated) {
            if (spec.groups == 0 || cout % spec.groups != 0)
                throw std::invalid_argument("ConvStack: layer " + std::to_string(i) + " has " + std::to_string(cout) +
                                            " channels, not divisible by " + std::to_string(spec.groups) + " groups");
            layer.norm = GroupNormParams<T>(cout, spec.groups);
        }
        layers_.push_back(std::move(layer));
    }
}

template <typename T>
void ConvStack<T>::initialize(std::mt19937_64& rng) {
    for (auto& layer : layers_) {
        layer.filter.initialize(rng);
        if (layer.activated) {
            std::fill(layer.norm.gamma.begin(), layer.norm.gamma.end(), T(1));
            std::fill(layer.norm.beta.begin(), layer.norm.beta.end(), T(0));
        }
    }
}

template <typename T>
void ConvStack<T>::zero() {
    for (auto& layer : layers_) {
        std::fill(layer.filter.data.begin(), layer.filter.data.end(), T(0));
        std::fill(layer.filter.bias.begin(), layer.filter.bias.end(), T(0));
        std::fill(layer.norm.gamma.begin(), layer.norm.gamma.end(), T(0));
        std::fill(layer.norm.beta.begin(), layer.norm.beta.end(), T(0));
    }
}

template <typename T>
PolarImage<T> ConvStack<T>::forward(const PolarImage<T>& z, Tape* tape) const {
    if (tape) *tape = Tape{};
    PolarImage<T> x = z;
    for (const auto& layer : layers_) {
        auto y = angular_conv_forward(x, layer.filter);
        if (tape) tape->inputs.push_back(std::move(x));
        if (layer.activated) {
            GroupNormCache cache;
            auto normed = group_norm(y, layer.norm, tape ? &cache : nullptr);
            x = relu(normed);
            if (tape) {
                tape->conv_out.push_back(std::move(y));
                tape->norm_out.push_back(std::move(normed));
                tape->norm_cache.push_back(std::move(cache));
            }
        } else {
            x = std::move(y);
            if (tape) {
                tape->conv_out.emplace_back();
                tape->norm_out.emplace_back();
                tape->norm_cache.emplace_back();
            }
        }
    }
    return x;
}

template <typename T>
PolarImage<T> ConvStack<T>::backward(const Tape& tape, const PolarImage<T>& upstream, ConvStack& grads) const {
    if (tape.inputs.size() != layers_.size()) throw std::invalid_argument("ConvStack::backward: tape does not match stack");
    PolarImage<T> g = upstream;
    for (std::size_t i = layers_.size(); i-- > 0;) {
        const auto& layer = layers_[i];
        auto& gl = grads.layers_[i];
        if (layer.activated) {
            g = relu_backward(tape.norm_out[i], g);
            auto ng = group_norm_backward(tape.conv_out[i], layer.norm, tape.norm_cache[i], g);
            for (std::size_t c = 0; c < ng.gamma.size(); ++c) {
                gl.norm.gamma[c] += ng.gamma[c];
                gl.norm.beta[c] += ng.beta[c];
            }
            g = std::move(ng.input);
        }
        auto cg = angular_conv_backward(tape.inputs[i], layer.filter, g);
        for (std::size_t k = 0; k < cg.filter.data.size(); ++k) gl.filter.data[k] += cg.filter.data[k];
        for (std::size_t k = 0; k < cg.filter.bias.size(); ++k) gl.filter.bias[k] += cg.filter.bias[k];
        g = std::move(cg.input);
    }
    return g;
}

template <typename T>
void ConvStack<T>::collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        auto& layer = layers_[i];
        const auto& f = layer.filter;
        const std::string base = prefix + ".layer" + std::to_string(i);
        out.push_back({base + ".filter", {f.C_out, f.C_in, f.N, f.band(), f.taps()}, layer.filter.data});
        out.push_back({base + ".bias", {f.C_out}, layer.filter.bias});
        if (layer.activated) {
            out.push_back({base + ".gamma", {f.C_out}, layer.norm.gamma});
            out.push_back({base + ".beta", {f.C_out}, layer.norm.beta});
        }
    }
}

template <typename T>
std::size_t ConvStack<T>::parameter_count() const {
    std::size_t count = 0;
    for (const auto& layer : layers_) {
        count += layer.filter.parameter_count();
        if (layer.activated) count += 2 * layer.filter.C_out;
    }
    return count;
}

template class ConvStack<float>;
template class ConvStack<double>;

}  // namespace ptdn
