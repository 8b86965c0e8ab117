#pragma once

// Self-check suites behind `ptdn check` and the timing sweep behind `ptdn bench`.
// Every suite returns {"suite", "pass", "checks": [{"name", "value", "threshold", "pass"}]}.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace ptdn {

nlohmann::json check_quadrature();
/// Roundtrip RMSE on phantom projections, phi normalization and the operator norm at side L.
nlohmann::json check_roundtrip(std::size_t L, std::size_t images, std::uint64_t seed);
/// Exact angular-shift equivariance of every layer and the attention block, plus the
/// approximate rotation commutation of the polar map at side L.
nlohmann::json check_equivariance(std::size_t L, std::size_t cases, std::uint64_t seed);
/// Fast paths against naive evaluation: gridding and attention.
nlohmann::json check_oracles(std::uint64_t seed);
/// model: "tiny-cnn", "tiny-transformer" or "layers".
nlohmann::json check_grads(const std::string& model, std::uint64_t seed);
nlohmann::json check_noise(std::uint64_t seed);

const std::vector<std::string>& check_suites();
/// Runs one suite by name ("all" runs every suite); L applies where a size is needed.
nlohmann::json run_check(const std::string& suite, std::size_t L, std::uint64_t seed, const std::string& model);

struct BenchRow {
    std::string op;
    std::size_t L = 0;
    double median_seconds = 0.0;
    std::size_t repeats = 0;
};

/// Median wall time of to_polar, polar_adjoint, from_polar and one attention block per size.
std::vector<BenchRow> bench_polar(const std::vector<std::size_t>& sizes, std::size_t repeats, std::uint64_t seed);

}  // namespace ptdn
