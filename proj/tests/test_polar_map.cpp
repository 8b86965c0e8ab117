#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "ptdn/polar_map.hpp"
#include "test_util.hpp"

using namespace ptdn;
using namespace ptdn::testing;

namespace {

PolarGrid auto_grid(std::size_t L) { return build_grid(GridParams{.L = L}); }

double rmse(const CartesianImage<double>& a, const CartesianImage<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) s += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
    return std::sqrt(s / static_cast<double>(a.data.size()));
}

}  // namespace

TEST_CASE("auto grid parameters") {
    const auto g = auto_grid(64);
    CHECK(g.N == 64);
    CHECK(g.M == 256);
    CHECK(g.delta == 1.0 / 64);
    CHECK(g.bandwidth == 1.0 / 64);
    CHECK(g.rule.radius == std::numbers::sqrt2 + 1.0 / 64);
}

TEST_CASE("quarter-turn grid point lies on the vertical axis") {
    const auto g = build_grid(GridParams{.L = 8, .N = 4, .M = 4, .delta = 0.0, .bandwidth = 1.0 / 8});
    for (std::size_t n = 0; n < 4; ++n) {
        CHECK(g.u[n * 4 + 1] == 0.0);
        CHECK(g.v[n * 4 + 1] == g.rule.nodes[n]);
    }
}

TEST_CASE("grid invariants") {
    const auto g = auto_grid(32);
    double sum = 0.0;
    for (double w : g.rule.weights) sum += w;
    const double R = std::numbers::sqrt2 + 1.0 / 32;
    CHECK(std::abs(sum - R * R / 2) / (R * R / 2) <= 1e-12);
    for (std::size_t n = 0; n < g.N; ++n)
        for (std::size_t m = 0; m < g.M; ++m) {
            const std::size_t p = n * g.M + m;
            const double r2 = g.rule.nodes[n] * g.rule.nodes[n];
            CHECK(std::abs(g.u[p] * g.u[p] + g.v[p] * g.v[p] - r2) <= 1e-12 * r2);
        }
    const double closed = std::sqrt(std::numbers::pi * 128 * 32.0 * 32.0 * std::pow(1.0 / 32, 4) / 2);
    CHECK(g.Z > 0);
    CHECK(std::abs(g.Z - closed) / closed <= 1e-12);
}

TEST_CASE("grid argument validation") {
    CHECK_THROWS_AS(build_grid(GridParams{.L = 15}), std::invalid_argument);
    CHECK_THROWS_AS(build_grid(GridParams{.L = 16, .M = 18}), std::invalid_argument);
    CHECK_THROWS_AS(build_grid(GridParams{.L = 16, .N = 2}), std::invalid_argument);
    CHECK_THROWS_AS(build_grid(GridParams{.L = 16, .bandwidth = 0.0}), std::invalid_argument);
}

TEST_CASE("to_polar of zeros is zero") {
    const auto g = auto_grid(16);
    const auto z = to_polar(CartesianImage<double>(16), g);
    for (double v : z.data) CHECK(v == 0.0);
}

TEST_CASE("impulse at the origin gives a radial profile") {
    const auto g = auto_grid(16);
    CartesianImage<double> x(16);
    x(8, 8) = 1.0;
    const auto naive = to_polar(x, g, GriddingPath::naive);
    const auto fast = to_polar(x, g, GriddingPath::fast);
    const double peak = std::sqrt(g.rule.weights[0]) / g.Z;
    for (std::size_t n = 0; n < g.N; ++n) {
        const double r = g.rule.nodes[n];
        const double expected = std::sqrt(g.rule.weights[n]) / g.Z * std::exp(-r * r / (2 * g.bandwidth * g.bandwidth));
        for (std::size_t m = 0; m < g.M; ++m) {
            CHECK(naive(0, n, m) == doctest::Approx(expected).epsilon(1e-12).scale(1e-300));
            // dropped terms are below exp(-truncation) of the peak
            CHECK(std::abs(fast(0, n, m) - expected) <= std::exp(-g.truncation) * peak);
        }
    }
}

TEST_CASE("fast gridding matches the untruncated sum") {
    const auto g = auto_grid(32);
    const auto x = blob_image<double>(32, {{1.0, 0.1, -0.2, 0.15}, {0.5, -0.3, 0.25, 0.08}});
    const auto fast = to_polar(x, g, GriddingPath::fast);
    const auto naive = to_polar(x, g, GriddingPath::naive);
    CHECK(rel_error(fast.data, naive.data) <= 1e-6);

    const auto xf = cast_image<float>(x);
    CHECK(rel_error(to_polar(xf, g).data, naive.data) <= 1e-6);

    std::mt19937_64 rng(3);
    const auto z = random_polar<double>(1, g.N, g.M, rng);
    CHECK(rel_error(polar_adjoint(z, g, GriddingPath::fast).data, polar_adjoint(z, g, GriddingPath::naive).data) <= 1e-6);
}

TEST_CASE("polar_adjoint is the adjoint of to_polar") {
    for (std::size_t L : {8u, 16u}) {
        const auto g = auto_grid(L);
        std::mt19937_64 rng(L);
        for (int trial = 0; trial < 5; ++trial) {
            const auto x = random_image<double>(L, rng);
            const auto z = random_polar<double>(1, g.N, g.M, rng);
            for (auto path : {GriddingPath::fast, GriddingPath::naive}) {
                const double lhs = dot(to_polar(x, g, path).data, z.data);
                const double rhs = dot(x.data, polar_adjoint(z, g, path).data);
                CHECK(std::abs(lhs - rhs) <= 1e-10 * std::abs(lhs));
            }
        }
    }
}

TEST_CASE("adjoint of zeros and of an impulse") {
    const auto g = auto_grid(16);
    const auto zero = polar_adjoint(PolarImage<double>(1, g.N, g.M), g);
    for (double v : zero.data) CHECK(v == 0.0);

    PolarImage<double> z(1, g.N, g.M);
    const std::size_t n = 5, m = 17;
    z(0, n, m) = 1.0;
    const auto x = polar_adjoint(z, g, GriddingPath::naive);
    const std::size_t p = n * g.M + m;
    const double scale = std::sqrt(g.rule.weights[n]) / g.Z;
    for (std::size_t a = 0; a < 16; ++a)
        for (std::size_t b = 0; b < 16; ++b) {
            const double du = g.u[p] - x.coord(a), dv = g.v[p] - x.coord(b);
            const double expected = scale * std::exp(-(du * du + dv * dv) / (2 * g.bandwidth * g.bandwidth));
            CHECK(x(a, b) == doctest::Approx(expected).epsilon(1e-12).scale(1e-300));
        }
}

TEST_CASE("phi kernel") {
    const auto phi = phi_kernel(64, 1.0 / 64);
    CHECK(phi(32, 32) == doctest::Approx(1.0 / std::numbers::pi).epsilon(1e-15));
    double sum = 0.0;
    for (double v : phi.data) sum += v;
    CHECK(std::abs(sum - 1.0) <= 1e-3);
    for (std::size_t a = 1; a < 64; ++a)
        for (std::size_t b = 1; b < 64; ++b) {
            CHECK(phi(a, b) == phi(64 - a, b));
            CHECK(phi(a, b) == phi(a, 64 - b));
            CHECK(phi(a, b) == phi(b, a));
        }
    CHECK_THROWS_AS(phi_kernel(63, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(phi_kernel(64, 0.0), std::invalid_argument);
}

TEST_CASE("from_polar of the zero image") {
    const auto g = auto_grid(32);
    const auto x = from_polar(to_polar(CartesianImage<double>(32), g), g);
    for (double v : x.data) CHECK(v == 0.0);
}

TEST_CASE("from_polar rejects NaN") {
    const auto g = auto_grid(16);
    PolarImage<double> z(1, g.N, g.M);
    z(0, 3, 3) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(from_polar(z, g), std::invalid_argument);
    CHECK_THROWS_AS(from_polar(PolarImage<double>(1, g.N + 1, g.M), g), std::invalid_argument);
    CHECK_THROWS_AS(to_polar(CartesianImage<double>(18), g), std::invalid_argument);
}

TEST_CASE("roundtrip error decreases as the polar grid is refined") {
    const std::size_t L = 64;
    const auto x = blob_image<double>(L, {{1.0, 0.1, -0.15, 0.12}, {0.7, -0.25, 0.2, 0.09}, {0.4, 0.3, 0.3, 0.07}});
    const auto coarse = build_grid(GridParams{.L = L, .N = L / 2, .M = L});
    const auto fine = auto_grid(L);
    const double e_coarse = rmse(from_polar(to_polar(x, coarse), coarse), x);
    const double e_fine = rmse(from_polar(to_polar(x, fine), fine), x);
    CAPTURE(e_coarse);
    CAPTURE(e_fine);
    CHECK(e_fine < e_coarse);
}

TEST_CASE("from_polar_adjoint is the adjoint of from_polar") {
    const auto g = auto_grid(16);
    std::mt19937_64 rng(9);
    const auto x = random_image<double>(16, rng);
    const auto z = random_polar<double>(1, g.N, g.M, rng);
    const double lhs = dot(from_polar(z, g).data, x.data);
    const double rhs = dot(z.data, from_polar_adjoint(x, g).data);
    CHECK(std::abs(lhs - rhs) <= 1e-10 * std::abs(lhs));
}

TEST_CASE("operator norm is close to one") {
    const auto g = auto_grid(32);
    const auto history = operator_norm_history(g, 50);
    CHECK(history.back() >= 0.9);
    CHECK(history.back() <= 1.1);
    for (std::size_t i = 1; i < history.size(); ++i) CHECK(history[i] >= history[i - 1] - 1e-12);
}

TEST_CASE("power iteration agrees with a dense eigensolver") {
    const std::size_t L = 16;
    const auto g = auto_grid(L);
    Eigen::MatrixXd P(g.N * g.M, L * L);
    for (std::size_t k = 0; k < L * L; ++k) {
        CartesianImage<double> e(L);
        e.data[k] = 1.0;
        const auto col = to_polar(e, g, GriddingPath::naive);
        for (std::size_t r = 0; r < col.data.size(); ++r) P(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = col.data[r];
    }
    const Eigen::MatrixXd PtP = P.transpose() * P;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(PtP, Eigen::EigenvaluesOnly);
    const double lambda = solver.eigenvalues().maxCoeff();
    const double estimate = operator_norm_estimate(g, 200);
    CAPTURE(lambda);
    CAPTURE(estimate);
    CHECK(std::abs(estimate - std::sqrt(lambda)) <= 1e-3);
    CHECK(std::abs(estimate * estimate - lambda) <= 1e-3);
}
