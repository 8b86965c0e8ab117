#include "ptdn/quadrature.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace ptdn {
namespace {

// Eigenvalues of a symmetric tridiagonal matrix together with the first
// component of each normalized eigenvector. Implicit-shift QL; only row 0 of
// the eigenvector matrix is tracked, which is all Golub-Welsch needs.
void tridiagonal_ql(std::vector<double>& diag, std::vector<double> offdiag, std::vector<double>& first_row) {
    const std::size_t n = diag.size();
    first_row.assign(n, 0.0);
    first_row[0] = 1.0;
    offdiag.push_back(0.0);  // offdiag[i] couples i and i+1

    for (std::size_t l = 0; l < n; ++l) {
        int iterations = 0;
        while (true) {
            std::size_t m = l;
            for (; m + 1 < n; ++m) {
                const double dd = std::abs(diag[m]) + std::abs(diag[m + 1]);
                if (std::abs(offdiag[m]) <= 1e-300 + std::numeric_limits<double>::epsilon() * dd) break;
            }
            if (m == l) break;
            if (++iterations > 60) throw std::runtime_error("tridiagonal QL failed to converge");

            double g = (diag[l + 1] - diag[l]) / (2.0 * offdiag[l]);
            double r = std::hypot(g, 1.0);
            g = diag[m] - diag[l] + offdiag[l] / (g + std::copysign(r, g));
            double s = 1.0, c = 1.0, p = 0.0;
            std::size_t i = m;
            bool deflated = false;
            while (i-- > l) {
                double f = s * offdiag[i];
                const double b = c * offdiag[i];
                r = std::hypot(f, g);
                offdiag[i + 1] = r;
                if (r == 0.0) {
                    diag[i + 1] -= p;
                    offdiag[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = diag[i + 1] - p;
                r = (diag[i] - g) * s + 2.0 * c * b;
                p = s * r;
                diag[i + 1] = g + p;
                g = c * r - b;
                f = first_row[i + 1];
                first_row[i + 1] = s * first_row[i] + c * f;
                first_row[i] = c * first_row[i] - s * f;
            }
            if (deflated) continue;
            diag[l] -= p;
            offdiag[l] = g;
            offdiag[m] = 0.0;
        }
    }
}

}  // namespace

RadialRule gauss_jacobi_radial(std::size_t n, double radius) {
    if (n == 0) throw std::invalid_argument("gauss_jacobi_radial: N must be >= 1");
    if (!(radius > 0.0)) throw std::invalid_argument("gauss_jacobi_radial: R must be > 0, got " + std::to_string(radius));

    // Monic Jacobi recurrence on [-1, 1] with weight (1 - x)^a (1 + x)^b, a = 0, b = 1:
    //   diag_k    = (b^2 - a^2) / ((2k + a + b)(2k + a + b + 2))
    //   offdiag_k = sqrt(4k (k + a)(k + b)(k + a + b) / ((2k + a + b)^2 (2k + a + b + 1)(2k + a + b - 1))),  k >= 1
    //   mu_0      = int_{-1}^{1} (1 + x) dx = 2
    constexpr double a = 0.0;
    constexpr double b = 1.0;
    std::vector<double> diag(n);
    std::vector<double> offdiag(n > 0 ? n - 1 : 0);
    for (std::size_t k = 0; k < n; ++k) {
        const double s = 2.0 * static_cast<double>(k) + a + b;
        diag[k] = (b * b - a * a) / (s * (s + 2.0));
    }
    for (std::size_t k = 1; k < n; ++k) {
        const double kk = static_cast<double>(k);
        const double s = 2.0 * kk + a + b;
        offdiag[k - 1] = std::sqrt(4.0 * kk * (kk + a) * (kk + b) * (kk + a + b) / (s * s * (s + 1.0) * (s - 1.0)));
    }
    constexpr double mu0 = 2.0;

    std::vector<double> first_row;
    tridiagonal_ql(diag, offdiag, first_row);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return diag[i] < diag[j]; });

    // x in [-1, 1] -> r = R (x + 1) / 2; (1 + x) dx = (2 r / R)(2 / R) dr, so weights scale by (R / 2)^2.
    RadialRule rule;
    rule.radius = radius;
    rule.nodes.resize(n);
    rule.weights.resize(n);
    const double half = 0.5 * radius;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = order[i];
        rule.nodes[i] = half * (diag[k] + 1.0);
        rule.weights[i] = mu0 * first_row[k] * first_row[k] * half * half;
    }
    return rule;
}

}  // namespace ptdn
