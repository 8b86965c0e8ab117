#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "ptdn/image.hpp"
#include "ptdn/quadrature.hpp"

namespace ptdn {

/// Grid parameters. Unset fields take the defaults N = L, M = 4L, delta = 1/L, b = 1/L.
struct GridParams {
    std::size_t L = 0;
    std::optional<std::size_t> N;
    std::optional<std::size_t> M;
    std::optional<double> delta;
    std::optional<double> bandwidth;
    /// Gaussian terms with exponent above this are dropped on the fast path.
    double truncation = 18.0;
};

/// Weighted polar grid with precomputed gridding windows and deconvolution filter.
/// Immutable once built.
class PolarGrid {
public:
    std::size_t L = 0, N = 0, M = 0;
    double delta = 0.0;
    double bandwidth = 0.0;
    double truncation = 18.0;
    RadialRule rule;
    std::vector<double> angles;  // gamma_m = 2 pi m / M
    std::vector<double> u, v;    // point (n, m) at index n * M + m
    double Z = 0.0;

    /// sqrt(w_n) / Z for radius n.
    [[nodiscard]] double radial_scale(std::size_t n) const { return scale_[n]; }

    /// Truncated separable Gaussian window of point p = n * M + m.
    struct Window {
        std::size_t a0, na, b0, nb, offset_a, offset_b;
    };
    [[nodiscard]] const Window& window(std::size_t p) const { return windows_[p]; }
    [[nodiscard]] const std::vector<double>& window_weights_a() const { return wa_; }
    [[nodiscard]] const std::vector<double>& window_weights_b() const { return wb_; }

    /// Real spectrum of the regularized inverse of the periodized phi kernel (L x L, DFT order).
    [[nodiscard]] const std::vector<double>& deconvolution_filter() const { return deconv_; }

private:
    friend PolarGrid build_grid(const GridParams& params);
    std::vector<double> scale_;
    std::vector<Window> windows_;
    std::vector<double> wa_, wb_;
    std::vector<double> deconv_;
};

/// Closed-form normalization sqrt(pi M L^2 b^4 / 2); makes P^T P approximate convolution with phi.
double grid_normalization(std::size_t L, std::size_t M, double bandwidth);

/// Throws std::invalid_argument for odd L, N or M < 4, M not divisible by 4, or b <= 0.
PolarGrid build_grid(const GridParams& params);

enum class GriddingPath { fast, naive };

/// Forward polar map P (single channel).
template <typename T>
PolarImage<T> to_polar(const CartesianImage<T>& x, const PolarGrid& g, GriddingPath path = GriddingPath::fast);

/// Exact adjoint P^T of to_polar.
template <typename T>
CartesianImage<T> polar_adjoint(const PolarImage<T>& z, const PolarGrid& g, GriddingPath path = GriddingPath::fast);

/// Circular deconvolution by phi with the grid's Tikhonov-regularized filter. Self-adjoint.
template <typename T>
CartesianImage<T> deconvolve(const CartesianImage<T>& y, const PolarGrid& g);

/// Approximate inverse: deconvolve(P^T z).
template <typename T>
CartesianImage<T> from_polar(const PolarImage<T>& z, const PolarGrid& g);

/// Adjoint of from_polar: P(deconvolve(x)).
template <typename T>
PolarImage<T> from_polar_adjoint(const CartesianImage<T>& x, const PolarGrid& g);

/// phi[i, j] = exp(-(i^2 + j^2) / (b L)^2) / (pi b^2 L^2) on the L x L index range.
CartesianImage<double> phi_kernel(std::size_t L, double bandwidth);

/// Power iteration on P^T P from a fixed-seed start. Returns sqrt of the Rayleigh
/// quotient after each iteration; the last entry is the estimate of ||P||.
std::vector<double> operator_norm_history(const PolarGrid& g, std::size_t iterations);
double operator_norm_estimate(const PolarGrid& g, std::size_t iterations);

}  // namespace ptdn
