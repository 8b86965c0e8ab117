#include "ptdn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

#include "ptdn/fft.hpp"

namespace ptdn {
namespace {

template <typename T>
using Mat = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMat = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using StridedMat = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMat =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>, 0, Eigen::OuterStride<>>;

// All circular shifts the filter taps need, as an (N * C_in * taps) x M row-major matrix with
// rows ordered (p, ci, k): row (p, ci, k) at m is z[ci, p, (m - q) mod M] with q = k - Q.
// Rows for the radial band of any output radius are then contiguous.
template <typename T>
std::vector<T> shifted_rows(const PolarImage<T>& z, std::size_t Q) {
    const std::size_t M = z.M, taps = 2 * Q + 1;
    std::vector<T> out(z.N * z.C * taps * M);
    for (std::size_t p = 0; p < z.N; ++p)
        for (std::size_t ci = 0; ci < z.C; ++ci) {
            const T* src = z.data.data() + (ci * z.N + p) * M;
            for (std::size_t k = 0; k < taps; ++k) {
                T* dst = out.data() + ((p * z.C + ci) * taps + k) * M;
                const std::size_t off = (M * (Q / M + 1) + Q - k) % M;  // (m - q) mod M = m + off
                for (std::size_t m = 0; m < M; ++m) dst[m] = src[(m + off) % M];
            }
        }
    return out;
}

// Weights of output radius n as a C_out x (band * C_in * taps) matrix matching shifted_rows.
template <typename T>
void gather_weights(const AngularFilter<T>& h, std::size_t n, std::vector<T>& out) {
    const std::size_t p0 = h.band_first(n), P = h.band_last(n) - p0 + 1, taps = h.taps();
    out.resize(h.C_out * P * h.C_in * taps);
    T* dst = out.data();
    for (std::size_t co = 0; co < h.C_out; ++co)
        for (std::size_t p = p0; p < p0 + P; ++p)
            for (std::size_t ci = 0; ci < h.C_in; ++ci, dst += taps)
                std::copy_n(h.data.data() + h.index(co, ci, n, p, -static_cast<long>(h.Q)), taps, dst);
}

template <typename T>
void scatter_weights(AngularFilter<T>& h, std::size_t n, const std::vector<T>& in) {
    const std::size_t p0 = h.band_first(n), P = h.band_last(n) - p0 + 1, taps = h.taps();
    const T* src = in.data();
    for (std::size_t co = 0; co < h.C_out; ++co)
        for (std::size_t p = p0; p < p0 + P; ++p)
            for (std::size_t ci = 0; ci < h.C_in; ++ci, src += taps)
                std::copy_n(src, taps, h.data.data() + h.index(co, ci, n, p, -static_cast<long>(h.Q)));
}

template <typename T>
void check_conv_shapes(const PolarImage<T>& z, const AngularFilter<T>& h, const char* where) {
    if (z.C != h.C_in || z.N != h.N)
        throw std::invalid_argument(std::string(where) + ": input " + shape_string(z) + " does not match filter (C_in=" +
                                    std::to_string(h.C_in) + ", N=" + std::to_string(h.N) + ")");
    if (h.data.size() != h.C_out * h.C_in * h.N * h.band() * h.taps() || h.bias.size() != h.C_out)
        throw std::invalid_argument(std::string(where) + ": filter storage size inconsistent with its shape");
}

// Sum of a row that does not depend on the row's rotation: every term is rounded to a
// fixed-point grid set by the row's largest magnitude and the integers are added exactly.
template <typename T>
double invariant_sum(std::span<const T> row, std::vector<double>& scratch, double center = 0.0, bool squares = false) {
    scratch.resize(row.size());
    double peak = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) {
        const double d = static_cast<double>(row[i]) - center;
        scratch[i] = squares ? d * d : d;
        peak = std::max(peak, std::abs(scratch[i]));
    }
    if (peak == 0.0) return 0.0;
    const int shift = 52 - std::ilogb(peak);
    __int128 acc = 0;
    for (double v : scratch) acc += static_cast<long long>(std::nearbyint(std::ldexp(v, shift)));
    return std::ldexp(static_cast<double>(acc), -shift);
}

}  // namespace

template <typename T>
std::size_t AngularFilter<T>::band_pairs() const {
    std::size_t count = 0;
    for (std::size_t n = 0; n < N; ++n) count += band_last(n) - band_first(n) + 1;
    return count;
}

template <typename T>
void AngularFilter<T>::initialize(std::mt19937_64& rng) {
    const double limit = std::sqrt(1.0 / static_cast<double>(C_in * taps() * band()));
    std::uniform_real_distribution<double> dist(-limit, limit);
    std::fill(data.begin(), data.end(), T(0));
    for (std::size_t co = 0; co < C_out; ++co)
        for (std::size_t ci = 0; ci < C_in; ++ci)
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t p = band_first(n); p <= band_last(n); ++p)
                    for (long q = -static_cast<long>(Q); q <= static_cast<long>(Q); ++q) at(co, ci, n, p, q) = static_cast<T>(dist(rng));
    std::fill(bias.begin(), bias.end(), T(0));
}

template <typename T>
PolarImage<T> angular_shift(const PolarImage<T>& z, long shift) {
    PolarImage<T> out(z.C, z.N, z.M);
    if (z.M == 0) return out;
    const long M = static_cast<long>(z.M);
    const std::size_t s = static_cast<std::size_t>(((shift % M) + M) % M);
    for (std::size_t r = 0; r < z.C * z.N; ++r) {
        const T* src = z.data.data() + r * z.M;
        T* dst = out.data.data() + r * z.M;
        for (std::size_t m = 0; m < z.M; ++m) dst[(m + s) % z.M] = src[m];
    }
    return out;
}

template <typename T>
PolarImage<T> angular_conv_forward(const PolarImage<T>& z, const AngularFilter<T>& h) {
    check_conv_shapes(z, h, "angular_conv_forward");
    const std::size_t M = z.M, N = z.N, Ci = h.C_in, Co = h.C_out, taps = h.taps();
    const auto shifted = shifted_rows(z, h.Q);
    PolarImage<T> out(Co, N, M);
    std::vector<T> wn;
    for (std::size_t n = 0; n < N; ++n) {
        const std::size_t p0 = h.band_first(n), cols = (h.band_last(n) - p0 + 1) * Ci * taps;
        gather_weights(h, n, wn);
        const ConstMat<T> W(wn.data(), Co, cols);
        const ConstMat<T> X(shifted.data() + p0 * Ci * taps * M, cols, M);
        StridedMat<T> Y(out.data.data() + n * M, Co, M, Eigen::OuterStride<>(N * M));
        Y.noalias() = W * X;
        for (std::size_t co = 0; co < Co; ++co) Y.row(co).array() += h.bias[co];
    }
    return out;
}

template <typename T>
PolarImage<T> angular_conv_forward_fft(const PolarImage<T>& z, const AngularFilter<T>& h) {
    check_conv_shapes(z, h, "angular_conv_forward_fft");
    const std::size_t M = z.M, N = z.N, F = M / 2 + 1;
    if (2 * h.Q + 1 > M) throw std::invalid_argument("angular_conv_forward_fft: filter wider than the angular grid");
    std::vector<std::complex<T>> zhat(z.C * N * F);
    for (std::size_t r = 0; r < z.C * N; ++r)
        fft::rfft<T>(std::span<const T>(z.data.data() + r * M, M), std::span<std::complex<T>>(zhat.data() + r * F, F));
    PolarImage<T> out(h.C_out, N, M);
    std::vector<T> kernel(M);
    std::vector<std::complex<T>> khat(F), acc(F);
    for (std::size_t co = 0; co < h.C_out; ++co) {
        for (std::size_t n = 0; n < N; ++n) {
            std::fill(acc.begin(), acc.end(), std::complex<T>(0));
            for (std::size_t ci = 0; ci < h.C_in; ++ci) {
                for (std::size_t p = h.band_first(n); p <= h.band_last(n); ++p) {
                    std::fill(kernel.begin(), kernel.end(), T(0));
                    for (long q = -static_cast<long>(h.Q); q <= static_cast<long>(h.Q); ++q)
                        kernel[static_cast<std::size_t>((q + static_cast<long>(M)) % static_cast<long>(M))] += h.at(co, ci, n, p, q);
                    fft::rfft<T>(kernel, khat);
                    const auto* zh = zhat.data() + (ci * N + p) * F;
                    for (std::size_t f = 0; f < F; ++f) acc[f] += khat[f] * zh[f];
                }
            }
            auto row = out.row(co, n);
            fft::irfft<T>(acc, row);
            for (auto& v : row) v += h.bias[co];
        }
    }
    return out;
}

template <typename T>
ConvGradients<T> angular_conv_backward(const PolarImage<T>& z, const AngularFilter<T>& h, const PolarImage<T>& upstream) {
    check_conv_shapes(z, h, "angular_conv_backward");
    if (upstream.C != h.C_out || upstream.N != z.N || upstream.M != z.M)
        throw std::invalid_argument("angular_conv_backward: upstream gradient shape " + shape_string(upstream) +
                                    " does not match forward output");
    const std::size_t M = z.M, N = z.N, Ci = h.C_in, Co = h.C_out, Q = h.Q, taps = h.taps();
    const auto shifted = shifted_rows(z, Q);
    std::vector<T> dshifted(shifted.size(), T(0));
    ConvGradients<T> grads{PolarImage<T>(z.C, N, M), AngularFilter<T>(Co, Ci, N, h.Q, h.W)};

    std::vector<T> wn, dwn;
    for (std::size_t n = 0; n < N; ++n) {
        const std::size_t p0 = h.band_first(n), cols = (h.band_last(n) - p0 + 1) * Ci * taps;
        gather_weights(h, n, wn);
        const ConstMat<T> W(wn.data(), Co, cols);
        const ConstStridedMat<T> U(upstream.data.data() + n * M, Co, M, Eigen::OuterStride<>(N * M));
        Mat<T> dX(dshifted.data() + p0 * Ci * taps * M, cols, M);
        dX.noalias() += W.transpose() * U;
        dwn.resize(Co * cols);
        Mat<T> dW(dwn.data(), Co, cols);
        dW.noalias() = U * ConstMat<T>(shifted.data() + p0 * Ci * taps * M, cols, M).transpose();
        scatter_weights(grads.filter, n, dwn);
    }

    // shifted row (p, ci, k) at m holds z[ci, p, (m + Q - k) mod M]
    for (std::size_t p = 0; p < N; ++p)
        for (std::size_t ci = 0; ci < Ci; ++ci) {
            T* dst = grads.input.data.data() + (ci * N + p) * M;
            for (std::size_t k = 0; k < taps; ++k) {
                const T* src = dshifted.data() + ((p * Ci + ci) * taps + k) * M;
                const std::size_t off = (k + M * (Q / M + 1) - Q) % M;  // m = j + k - Q
                for (std::size_t j = 0; j < M; ++j) dst[j] += src[(j + off) % M];
            }
        }

    for (std::size_t co = 0; co < Co; ++co) {
        double b = 0.0;
        for (std::size_t k = co * N * M; k < (co + 1) * N * M; ++k) b += static_cast<double>(upstream.data[k]);
        grads.filter.bias[co] = static_cast<T>(b);
    }
    return grads;
}

template <typename T>
PolarImage<T> group_norm(const PolarImage<T>& z, const GroupNormParams<T>& params, GroupNormCache* cache) {
    const std::size_t G = params.groups;
    if (G == 0 || z.C % G != 0)
        throw std::invalid_argument("group_norm: channel count " + std::to_string(z.C) + " not divisible by " +
                                    std::to_string(G) + " groups");
    if (params.gamma.size() != z.C || params.beta.size() != z.C)
        throw std::invalid_argument("group_norm: affine parameters must have one entry per channel");
    const std::size_t per = z.C / G;
    const double count = static_cast<double>(per * z.N * z.M);
    std::vector<double> scratch;
    GroupNormCache local;
    local.mean.resize(G);
    local.inv_std.resize(G);
    PolarImage<T> out(z.C, z.N, z.M);
    for (std::size_t g = 0; g < G; ++g) {
        double sum = 0.0;
        for (std::size_t c = g * per; c < (g + 1) * per; ++c)
            for (std::size_t n = 0; n < z.N; ++n) sum += invariant_sum<T>(z.row(c, n), scratch);
        const double mean = sum / count;
        double sq = 0.0;
        for (std::size_t c = g * per; c < (g + 1) * per; ++c)
            for (std::size_t n = 0; n < z.N; ++n) sq += invariant_sum<T>(z.row(c, n), scratch, mean, true);
        const double inv_std = 1.0 / std::sqrt(sq / count + params.eps);
        local.mean[g] = mean;
        local.inv_std[g] = inv_std;
        for (std::size_t c = g * per; c < (g + 1) * per; ++c) {
            const double gamma = static_cast<double>(params.gamma[c]);
            const double beta = static_cast<double>(params.beta[c]);
            for (std::size_t k = c * z.N * z.M; k < (c + 1) * z.N * z.M; ++k)
                out.data[k] = static_cast<T>(gamma * (static_cast<double>(z.data[k]) - mean) * inv_std + beta);
        }
    }
    if (cache) *cache = std::move(local);
    return out;
}

template <typename T>
GroupNormGradients<T> group_norm_backward(const PolarImage<T>& z, const GroupNormParams<T>& params,
                                          const GroupNormCache& cache, const PolarImage<T>& upstream) {
    if (!z.same_shape(upstream)) throw std::invalid_argument("group_norm_backward: upstream shape mismatch");
    const std::size_t G = params.groups;
    if (G == 0 || z.C % G != 0 || cache.mean.size() != G || cache.inv_std.size() != G)
        throw std::invalid_argument("group_norm_backward: cache does not match the forward pass");
    const std::size_t per = z.C / G;
    const std::size_t plane = z.N * z.M;
    const double count = static_cast<double>(per * plane);
    GroupNormGradients<T> grads{PolarImage<T>(z.C, z.N, z.M), std::vector<T>(z.C), std::vector<T>(z.C)};
    for (std::size_t g = 0; g < G; ++g) {
        const double mean = cache.mean[g];
        const double inv_std = cache.inv_std[g];
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (std::size_t c = g * per; c < (g + 1) * per; ++c) {
            const double gamma = static_cast<double>(params.gamma[c]);
            double dgamma = 0.0, dbeta = 0.0;
            for (std::size_t k = c * plane; k < (c + 1) * plane; ++k) {
                const double xhat = (static_cast<double>(z.data[k]) - mean) * inv_std;
                const double dy = static_cast<double>(upstream.data[k]);
                dgamma += dy * xhat;
                dbeta += dy;
                sum_dxhat += dy * gamma;
                sum_dxhat_xhat += dy * gamma * xhat;
            }
            grads.gamma[c] = static_cast<T>(dgamma);
            grads.beta[c] = static_cast<T>(dbeta);
        }
        const double mean_dxhat = sum_dxhat / count;
        const double mean_dxhat_xhat = sum_dxhat_xhat / count;
        for (std::size_t c = g * per; c < (g + 1) * per; ++c) {
            const double gamma = static_cast<double>(params.gamma[c]);
            for (std::size_t k = c * plane; k < (c + 1) * plane; ++k) {
                const double xhat = (static_cast<double>(z.data[k]) - mean) * inv_std;
                const double dxhat = static_cast<double>(upstream.data[k]) * gamma;
                grads.input.data[k] = static_cast<T>(inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat));
            }
        }
    }
    return grads;
}

template <typename T>
PolarImage<T> relu(const PolarImage<T>& z) {
    PolarImage<T> out(z.C, z.N, z.M);
    for (std::size_t k = 0; k < z.data.size(); ++k) out.data[k] = z.data[k] > T(0) ? z.data[k] : T(0);
    return out;
}

template <typename T>
PolarImage<T> relu_backward(const PolarImage<T>& input, const PolarImage<T>& upstream) {
    if (!input.same_shape(upstream)) throw std::invalid_argument("relu_backward: shape mismatch");
    PolarImage<T> out(input.C, input.N, input.M);
    for (std::size_t k = 0; k < input.data.size(); ++k) out.data[k] = input.data[k] > T(0) ? upstream.data[k] : T(0);
    return out;
}

#define PTDN_INSTANTIATE(T)                                                                                         \
    template struct AngularFilter<T>;                                                                               \
    template PolarImage<T> angular_shift<T>(const PolarImage<T>&, long);                                           \
    template PolarImage<T> angular_conv_forward<T>(const PolarImage<T>&, const AngularFilter<T>&);                  \
    template PolarImage<T> angular_conv_forward_fft<T>(const PolarImage<T>&, const AngularFilter<T>&);              \
    template ConvGradients<T> angular_conv_backward<T>(const PolarImage<T>&, const AngularFilter<T>&,               \
                                                       const PolarImage<T>&);                                       \
    template PolarImage<T> group_norm<T>(const PolarImage<T>&, const GroupNormParams<T>&, GroupNormCache*);         \
    template GroupNormGradients<T> group_norm_backward<T>(const PolarImage<T>&, const GroupNormParams<T>&,          \
                                                          const GroupNormCache&, const PolarImage<T>&);             \
    template PolarImage<T> relu<T>(const PolarImage<T>&);                                                           \
    template PolarImage<T> relu_backward<T>(const PolarImage<T>&, const PolarImage<T>&);

PTDN_INSTANTIATE(float)
PTDN_INSTANTIATE(double)

}  // namespace ptdn
