#pragma once

#include <vector>

namespace ptdn {

/// Gauss rule for the radial area measure r dr on [0, R].
struct RadialRule {
    std::vector<double> nodes;    // strictly increasing, inside (0, R)
    std::vector<double> weights;  // positive, sum to R^2 / 2
    double radius = 0.0;

    [[nodiscard]] std::size_t size() const { return nodes.size(); }
};

/// N-point Gauss-Jacobi rule with parameters (alpha, beta) = (0, 1), mapped from
/// [-1, 1] to [0, R]. Exact for p(r) r dr with deg p <= 2N - 1.
/// Throws std::invalid_argument for N == 0 or R <= 0.
RadialRule gauss_jacobi_radial(std::size_t n, double radius);

}  // namespace ptdn
