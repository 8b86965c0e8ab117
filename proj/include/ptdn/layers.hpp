#pragma once

#include <algorithm>
#include <cstddef>
#include <random>
#include <vector>

#include "ptdn/image.hpp"

namespace ptdn {

/// Banded angular filter h[c_out, c_in, n, p, q] plus one bias per output channel.
/// Storage is [c_out][c_in][n][d][k] with d = p - n + W in [0, 2W] and k = q + Q in [0, 2Q].
/// Slots whose p falls outside [0, N) are kept at zero and never read.
template <typename T>
struct AngularFilter {
    std::size_t C_out = 0, C_in = 0, N = 0, Q = 0, W = 0;
    std::vector<T> data;
    std::vector<T> bias;

    AngularFilter() = default;
    AngularFilter(std::size_t c_out, std::size_t c_in, std::size_t n, std::size_t q, std::size_t w)
        : C_out(c_out), C_in(c_in), N(n), Q(q), W(w), data(c_out * c_in * n * (2 * w + 1) * (2 * q + 1), T(0)),
          bias(c_out, T(0)) {}

    [[nodiscard]] std::size_t band() const { return 2 * W + 1; }
    [[nodiscard]] std::size_t taps() const { return 2 * Q + 1; }

    /// Flat index of h[co, ci, n, p, q]; requires |n - p| <= W.
    [[nodiscard]] std::size_t index(std::size_t co, std::size_t ci, std::size_t n, std::size_t p, long q) const {
        const std::size_t d = p + W - n;
        return (((co * C_in + ci) * N + n) * band() + d) * taps() + static_cast<std::size_t>(q + static_cast<long>(Q));
    }
    T& at(std::size_t co, std::size_t ci, std::size_t n, std::size_t p, long q) { return data[index(co, ci, n, p, q)]; }
    const T& at(std::size_t co, std::size_t ci, std::size_t n, std::size_t p, long q) const { return data[index(co, ci, n, p, q)]; }

    /// Valid radial partners of n: [first, last].
    [[nodiscard]] std::size_t band_first(std::size_t n) const { return n > W ? n - W : 0; }
    [[nodiscard]] std::size_t band_last(std::size_t n) const { return std::min(N - 1, n + W); }

    /// Number of (n, p) pairs with |n - p| <= W.
    [[nodiscard]] std::size_t band_pairs() const;
    /// Filter entries on the band plus biases.
    [[nodiscard]] std::size_t parameter_count() const { return C_out * C_in * taps() * band_pairs() + C_out; }

    /// Fan-in uniform init in +-sqrt(1 / (C_in (2Q+1) (2W+1))); bias zero.
    void initialize(std::mt19937_64& rng);
};

template <typename T>
struct ConvGradients {
    PolarImage<T> input;
    AngularFilter<T> filter;  // gradient w.r.t. data and bias
};

/// out[c, n, m] = z[c, n, (m - shift) mod M].
template <typename T>
PolarImage<T> angular_shift(const PolarImage<T>& z, long shift);

/// Banded angular convolution, direct summation. Circular in m.
template <typename T>
PolarImage<T> angular_conv_forward(const PolarImage<T>& z, const AngularFilter<T>& h);

/// Same map evaluated through length-M FFTs along the angular axis.
template <typename T>
PolarImage<T> angular_conv_forward_fft(const PolarImage<T>& z, const AngularFilter<T>& h);

template <typename T>
ConvGradients<T> angular_conv_backward(const PolarImage<T>& z, const AngularFilter<T>& h, const PolarImage<T>& upstream);

template <typename T>
struct GroupNormParams {
    std::size_t groups = 1;
    std::vector<T> gamma;
    std::vector<T> beta;
    double eps = 1e-5;

    GroupNormParams() = default;
    GroupNormParams(std::size_t channels, std::size_t g) : groups(g), gamma(channels, T(1)), beta(channels, T(0)) {}
};

/// Per-group statistics kept for the backward pass.
struct GroupNormCache {
    std::vector<double> mean;
    std::vector<double> inv_std;
};

/// out = gamma_c (z - mu_g) / sqrt(var_g + eps) + beta_c. Group statistics are computed
/// from fixed-point row sums, so they are exactly invariant under angular shifts.
template <typename T>
PolarImage<T> group_norm(const PolarImage<T>& z, const GroupNormParams<T>& params, GroupNormCache* cache = nullptr);

template <typename T>
struct GroupNormGradients {
    PolarImage<T> input;
    std::vector<T> gamma;
    std::vector<T> beta;
};

template <typename T>
GroupNormGradients<T> group_norm_backward(const PolarImage<T>& z, const GroupNormParams<T>& params,
                                          const GroupNormCache& cache, const PolarImage<T>& upstream);

template <typename T>
PolarImage<T> relu(const PolarImage<T>& z);

/// Masks upstream by (forward input > 0).
template <typename T>
PolarImage<T> relu_backward(const PolarImage<T>& input, const PolarImage<T>& upstream);

}  // namespace ptdn
