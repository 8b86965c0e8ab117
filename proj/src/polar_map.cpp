#include "ptdn/polar_map.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>

#include "ptdn/fft.hpp"

namespace ptdn {
namespace {

constexpr double kPi = std::numbers::pi;

template <typename T>
void require_finite(std::span<const T> values, const char* where) {
    for (const T& v : values)
        if (!std::isfinite(static_cast<double>(v))) throw std::invalid_argument(std::string(where) + ": non-finite input");
}

void require_polar_shape(const PolarGrid& g, std::size_t c, std::size_t n, std::size_t m, const char* where) {
    if (c != 1 || n != g.N || m != g.M)
        throw std::invalid_argument(std::string(where) + ": expected 1x" + std::to_string(g.N) + "x" + std::to_string(g.M) +
                                    " polar image, got " + std::to_string(c) + "x" + std::to_string(n) + "x" +
                                    std::to_string(m));
}

void require_side(const PolarGrid& g, std::size_t L, const char* where) {
    if (L != g.L)
        throw std::invalid_argument(std::string(where) + ": image side " + std::to_string(L) + " does not match grid L=" +
                                    std::to_string(g.L));
}

}  // namespace

double grid_normalization(std::size_t L, std::size_t M, double bandwidth) {
    const double l = static_cast<double>(L);
    const double b2 = bandwidth * bandwidth;
    return std::sqrt(kPi * static_cast<double>(M) * l * l * b2 * b2 / 2.0);
}

CartesianImage<double> phi_kernel(std::size_t L, double bandwidth) {
    if (L == 0 || L % 2 != 0) throw std::invalid_argument("phi_kernel: L must be even and positive");
    if (!(bandwidth > 0.0)) throw std::invalid_argument("phi_kernel: bandwidth must be > 0");
    CartesianImage<double> phi(L);
    const double s2 = bandwidth * bandwidth * static_cast<double>(L) * static_cast<double>(L);
    const double half = static_cast<double>(L / 2);
    for (std::size_t a = 0; a < L; ++a) {
        const double i = static_cast<double>(a) - half;
        for (std::size_t b = 0; b < L; ++b) {
            const double j = static_cast<double>(b) - half;
            phi(a, b) = std::exp(-(i * i + j * j) / s2) / (kPi * s2);
        }
    }
    return phi;
}

PolarGrid build_grid(const GridParams& params) {
    const std::size_t L = params.L;
    if (L < 2 || L % 2 != 0) throw std::invalid_argument("build_grid: L must be even, got " + std::to_string(L));
    PolarGrid g;
    g.L = L;
    g.N = params.N.value_or(L);
    g.M = params.M.value_or(4 * L);
    g.delta = params.delta.value_or(1.0 / static_cast<double>(L));
    g.bandwidth = params.bandwidth.value_or(1.0 / static_cast<double>(L));
    g.truncation = params.truncation;
    if (g.N < 4) throw std::invalid_argument("build_grid: N must be >= 4");
    if (g.M < 4 || g.M % 4 != 0) throw std::invalid_argument("build_grid: M must be >= 4 and divisible by 4, got " + std::to_string(g.M));
    if (!(g.delta >= 0.0)) throw std::invalid_argument("build_grid: delta must be >= 0");
    if (!(g.bandwidth > 0.0)) throw std::invalid_argument("build_grid: bandwidth must be > 0");
    if (!(g.truncation > 0.0)) throw std::invalid_argument("build_grid: truncation must be > 0");

    g.rule = gauss_jacobi_radial(g.N, std::numbers::sqrt2 + g.delta);
    g.Z = grid_normalization(L, g.M, g.bandwidth);
    g.angles.resize(g.M);
    for (std::size_t m = 0; m < g.M; ++m) g.angles[m] = 2.0 * kPi * static_cast<double>(m) / static_cast<double>(g.M);

    // Exact quarter turns keep (u, v) on the axes for m a multiple of M / 4.
    auto cos_sin = [&](std::size_t m) -> std::pair<double, double> {
        const std::size_t quarter = g.M / 4;
        const std::size_t k = m / quarter;
        const double t = 2.0 * kPi * static_cast<double>(m % quarter) / static_cast<double>(g.M);
        const double c = std::cos(t), s = std::sin(t);
        switch (k) {
            case 0: return {c, s};
            case 1: return {-s, c};
            case 2: return {-c, -s};
            default: return {s, -c};
        }
    };

    const std::size_t P = g.N * g.M;
    g.u.resize(P);
    g.v.resize(P);
    g.scale_.resize(g.N);
    for (std::size_t n = 0; n < g.N; ++n) {
        g.scale_[n] = std::sqrt(g.rule.weights[n]) / g.Z;
        for (std::size_t m = 0; m < g.M; ++m) {
            const auto [c, s] = cos_sin(m);
            g.u[n * g.M + m] = g.rule.nodes[n] * c;
            g.v[n * g.M + m] = g.rule.nodes[n] * s;
        }
    }

    // Separable truncated windows: a pixel contributes along one axis when (t - x)^2 / (2 b^2) <= truncation.
    const double reach = g.bandwidth * std::sqrt(2.0 * g.truncation);
    const double half_l = static_cast<double>(L) / 2.0;
    const double inv_2b2 = 1.0 / (2.0 * g.bandwidth * g.bandwidth);
    auto axis_window = [&](double t, std::size_t& first, std::size_t& count, std::vector<double>& weights) {
        const double lo = std::ceil((t - reach) * half_l + half_l);
        const double hi = std::floor((t + reach) * half_l + half_l);
        const double clo = std::max(lo, 0.0);
        const double chi = std::min(hi, static_cast<double>(L) - 1.0);
        if (chi < clo) {
            first = 0;
            count = 0;
            return;
        }
        first = static_cast<std::size_t>(clo);
        count = static_cast<std::size_t>(chi - clo) + 1;
        for (std::size_t k = 0; k < count; ++k) {
            const double x = 2.0 * (static_cast<double>(first + k) - half_l) / static_cast<double>(L);
            weights.push_back(std::exp(-(t - x) * (t - x) * inv_2b2));
        }
    };
    g.windows_.resize(P);
    for (std::size_t p = 0; p < P; ++p) {
        auto& w = g.windows_[p];
        w.offset_a = g.wa_.size();
        axis_window(g.u[p], w.a0, w.na, g.wa_);
        w.offset_b = g.wb_.size();
        axis_window(g.v[p], w.b0, w.nb, g.wb_);
        if (w.na == 0 || w.nb == 0) w.na = w.nb = 0;
    }

    // Periodize phi on the L x L torus (DFT order), take its spectrum, and form the Tikhonov inverse.
    const double s2 = g.bandwidth * g.bandwidth * static_cast<double>(L) * static_cast<double>(L);
    std::vector<std::complex<double>> spectrum(L * L);
    const long l = static_cast<long>(L);
    const int wraps = 2;
    for (long a = 0; a < l; ++a) {
        for (long b = 0; b < l; ++b) {
            double acc = 0.0;
            for (int wa = -wraps; wa <= wraps; ++wa) {
                for (int wb = -wraps; wb <= wraps; ++wb) {
                    const double i = static_cast<double>((a <= l / 2 ? a : a - l) + wa * l);
                    const double j = static_cast<double>((b <= l / 2 ? b : b - l) + wb * l);
                    acc += std::exp(-(i * i + j * j) / s2);
                }
            }
            spectrum[static_cast<std::size_t>(a * l + b)] = acc / (kPi * s2);
        }
    }
    fft::fft2(spectrum, L, false);
    double peak = 0.0;
    for (const auto& c : spectrum) peak = std::max(peak, std::abs(c.real()));
    const double floor = 1e-6 * peak;
    g.deconv_.resize(L * L);
    for (std::size_t k = 0; k < L * L; ++k) {
        const double f = spectrum[k].real();
        g.deconv_[k] = f / (f * f + floor * floor);
    }
    return g;
}

template <typename T>
PolarImage<T> to_polar(const CartesianImage<T>& x, const PolarGrid& g, GriddingPath path) {
    require_side(g, x.L, "to_polar");
    require_finite<T>(x.data, "to_polar");
    PolarImage<T> z(1, g.N, g.M);
    const std::size_t L = g.L;
    if (path == GriddingPath::fast) {
        const auto& wa = g.window_weights_a();
        const auto& wb = g.window_weights_b();
        for (std::size_t n = 0; n < g.N; ++n) {
            const double scale = g.radial_scale(n);
            for (std::size_t m = 0; m < g.M; ++m) {
                const auto& w = g.window(n * g.M + m);
                double acc = 0.0;
                for (std::size_t ka = 0; ka < w.na; ++ka) {
                    const T* xrow = x.data.data() + (w.a0 + ka) * L + w.b0;
                    double inner = 0.0;
                    for (std::size_t kb = 0; kb < w.nb; ++kb) inner += wb[w.offset_b + kb] * static_cast<double>(xrow[kb]);
                    acc += wa[w.offset_a + ka] * inner;
                }
                z(0, n, m) = static_cast<T>(scale * acc);
            }
        }
        return z;
    }
    const double inv_2b2 = 1.0 / (2.0 * g.bandwidth * g.bandwidth);
    std::vector<double> ea(L), eb(L);
    for (std::size_t n = 0; n < g.N; ++n) {
        const double scale = g.radial_scale(n);
        for (std::size_t m = 0; m < g.M; ++m) {
            const std::size_t p = n * g.M + m;
            for (std::size_t a = 0; a < L; ++a) {
                const double du = g.u[p] - x.coord(a);
                const double dv = g.v[p] - x.coord(a);
                ea[a] = std::exp(-du * du * inv_2b2);
                eb[a] = std::exp(-dv * dv * inv_2b2);
            }
            double acc = 0.0;
            for (std::size_t a = 0; a < L; ++a) {
                double inner = 0.0;
                for (std::size_t b = 0; b < L; ++b) inner += eb[b] * static_cast<double>(x(a, b));
                acc += ea[a] * inner;
            }
            z(0, n, m) = static_cast<T>(scale * acc);
        }
    }
    return z;
}

template <typename T>
CartesianImage<T> polar_adjoint(const PolarImage<T>& z, const PolarGrid& g, GriddingPath path) {
    require_polar_shape(g, z.C, z.N, z.M, "polar_adjoint");
    require_finite<T>(z.data, "polar_adjoint");
    const std::size_t L = g.L;
    std::vector<double> acc(L * L, 0.0);
    if (path == GriddingPath::fast) {
        const auto& wa = g.window_weights_a();
        const auto& wb = g.window_weights_b();
        for (std::size_t n = 0; n < g.N; ++n) {
            const double scale = g.radial_scale(n);
            for (std::size_t m = 0; m < g.M; ++m) {
                const auto& w = g.window(n * g.M + m);
                const double value = scale * static_cast<double>(z(0, n, m));
                for (std::size_t ka = 0; ka < w.na; ++ka) {
                    double* row = acc.data() + (w.a0 + ka) * L + w.b0;
                    const double va = value * wa[w.offset_a + ka];
                    for (std::size_t kb = 0; kb < w.nb; ++kb) row[kb] += va * wb[w.offset_b + kb];
                }
            }
        }
    } else {
        const double inv_2b2 = 1.0 / (2.0 * g.bandwidth * g.bandwidth);
        const double half = static_cast<double>(L) / 2.0;
        std::vector<double> ea(L), eb(L);
        for (std::size_t n = 0; n < g.N; ++n) {
            const double scale = g.radial_scale(n);
            for (std::size_t m = 0; m < g.M; ++m) {
                const std::size_t p = n * g.M + m;
                for (std::size_t a = 0; a < L; ++a) {
                    const double x = 2.0 * (static_cast<double>(a) - half) / static_cast<double>(L);
                    ea[a] = std::exp(-(g.u[p] - x) * (g.u[p] - x) * inv_2b2);
                    eb[a] = std::exp(-(g.v[p] - x) * (g.v[p] - x) * inv_2b2);
                }
                const double value = scale * static_cast<double>(z(0, n, m));
                for (std::size_t a = 0; a < L; ++a)
                    for (std::size_t b = 0; b < L; ++b) acc[a * L + b] += value * ea[a] * eb[b];
            }
        }
    }
    CartesianImage<T> x(L);
    for (std::size_t k = 0; k < L * L; ++k) x.data[k] = static_cast<T>(acc[k]);
    return x;
}

template <typename T>
CartesianImage<T> deconvolve(const CartesianImage<T>& y, const PolarGrid& g) {
    require_side(g, y.L, "deconvolve");
    const std::size_t L = g.L;
    std::vector<std::complex<double>> buf(L * L);
    for (std::size_t k = 0; k < L * L; ++k) buf[k] = static_cast<double>(y.data[k]);
    fft::fft2(buf, L, false);
    const auto& filter = g.deconvolution_filter();
    for (std::size_t k = 0; k < L * L; ++k) buf[k] *= filter[k];
    fft::fft2(buf, L, true);
    CartesianImage<T> x(L);
    for (std::size_t k = 0; k < L * L; ++k) x.data[k] = static_cast<T>(buf[k].real());
    return x;
}

template <typename T>
CartesianImage<T> from_polar(const PolarImage<T>& z, const PolarGrid& g) {
    return deconvolve(polar_adjoint(z, g), g);
}

template <typename T>
PolarImage<T> from_polar_adjoint(const CartesianImage<T>& x, const PolarGrid& g) {
    return to_polar(deconvolve(x, g), g);
}

std::vector<double> operator_norm_history(const PolarGrid& g, std::size_t iterations) {
    if (iterations < 1) throw std::invalid_argument("operator_norm_estimate: need at least one iteration");
    std::mt19937_64 rng(0x5eed);
    std::normal_distribution<double> normal;
    CartesianImage<double> x(g.L);
    for (auto& v : x.data) v = normal(rng);
    std::vector<double> history;
    history.reserve(iterations);
    for (std::size_t it = 0; it < iterations; ++it) {
        double norm2 = 0.0;
        for (double v : x.data) norm2 += v * v;
        const double inv = 1.0 / std::sqrt(norm2);
        for (auto& v : x.data) v *= inv;
        const auto z = to_polar(x, g);
        double pz = 0.0;
        for (double v : z.data) pz += v * v;
        history.push_back(std::sqrt(pz));
        x = polar_adjoint(z, g);
    }
    return history;
}

double operator_norm_estimate(const PolarGrid& g, std::size_t iterations) {
    return operator_norm_history(g, iterations).back();
}

#define PTDN_INSTANTIATE(T)                                                                             \
    template PolarImage<T> to_polar<T>(const CartesianImage<T>&, const PolarGrid&, GriddingPath);      \
    template CartesianImage<T> polar_adjoint<T>(const PolarImage<T>&, const PolarGrid&, GriddingPath); \
    template CartesianImage<T> deconvolve<T>(const CartesianImage<T>&, const PolarGrid&);             \
    template CartesianImage<T> from_polar<T>(const PolarImage<T>&, const PolarGrid&);                 \
    template PolarImage<T> from_polar_adjoint<T>(const CartesianImage<T>&, const PolarGrid&);

PTDN_INSTANTIATE(float)
PTDN_INSTANTIATE(double)

}  // namespace ptdn
