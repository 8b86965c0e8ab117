#include "ptdn/checks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include "ptdn/attention.hpp"
#include "ptdn/polar_map.hpp"
#include "ptdn/quadrature.hpp"
#include "ptdn/simdata.hpp"
#include "ptdn/training.hpp"

namespace ptdn {

using json = nlohmann::json;

namespace {

json entry(const std::string& name, double value, double threshold, bool pass) {
    return {{"name", name}, {"value", value}, {"threshold", threshold}, {"pass", pass}};
}

json at_most(const std::string& name, double value, double threshold) {
    return entry(name, value, threshold, std::isfinite(value) && value <= threshold);
}

json report(const std::string& suite, json checks) {
    bool pass = true;
    for (const auto& c : checks) pass = pass && c.at("pass").get<bool>();
    return {{"suite", suite}, {"pass", pass}, {"checks", std::move(checks)}};
}

template <typename A, typename B>
double rel_diff(const std::vector<A>& a, const std::vector<B>& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        num += d * d;
        den += static_cast<double>(b[i]) * static_cast<double>(b[i]);
    }
    return den > 0 ? std::sqrt(num / den) : std::sqrt(num);
}

template <typename T>
PolarImage<T> random_polar(std::size_t C, std::size_t N, std::size_t M, std::mt19937_64& rng) {
    PolarImage<T> z(C, N, M);
    std::normal_distribution<double> d;
    for (auto& v : z.data) v = static_cast<T>(d(rng));
    return z;
}

template <typename T>
CartesianImage<T> random_image(std::size_t L, std::mt19937_64& rng) {
    CartesianImage<T> x(L);
    std::normal_distribution<double> d;
    for (auto& v : x.data) v = static_cast<T>(d(rng));
    return x;
}

// Random stack with nonzero biases and norm offsets.
ConvStack<double> random_stack(const ConvStackSpec& spec, std::mt19937_64& rng) {
    ConvStack<double> s(spec);
    s.initialize(rng);
    std::normal_distribution<double> d(0.0, 0.1);
    std::vector<ParamRef<double>> refs;
    s.collect("s", refs);
    for (auto& r : refs)
        if (!r.name.ends_with(".filter"))
            for (auto& v : r.values) v += d(rng);
    return s;
}

ModelConfig tiny_config(ModelKind kind) {
    ModelConfig c;
    c.kind = kind;
    c.L = 16;
    c.N = 8;
    c.M = 32;
    c.depth = 2;
    c.channels = 2;
    c.pre_depth = c.attn_depth = c.post_depth = 2;
    c.pre_channels = c.attn_channels = c.post_channels = 2;
    c.groups = 2;
    c.K = 2;
    c.Q = 2;
    c.W = 1;
    return c;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

}  // namespace

json check_quadrature() {
    json checks = json::array();
    for (std::size_t N : {4, 16, 64}) {
        double worst = 0.0;
        for (double R : {1.0, std::numbers::sqrt2 + 1.0 / 64}) {
            const auto rule = gauss_jacobi_radial(N, R);
            for (std::size_t k = 0; k < 2 * N; ++k) {
                double s = 0.0;
                for (std::size_t i = 0; i < N; ++i) s += rule.weights[i] * std::pow(rule.nodes[i], double(k));
                const double exact = std::pow(R, double(k + 2)) / double(k + 2);
                worst = std::max(worst, std::abs(s - exact) / exact);
            }
        }
        checks.push_back(at_most("monomials r^k, k <= 2N-1, N=" + std::to_string(N), worst, 1e-10));
    }
    return report("quadrature", std::move(checks));
}

json check_roundtrip(std::size_t L, std::size_t images, std::uint64_t seed) {
    const auto grid = build_grid({.L = L});
    std::mt19937_64 rng(seed);
    double worst = 0.0, sum_sq = 0.0, sum_ref = 0.0;
    for (std::size_t i = 0; i < images; ++i) {
        const auto x = project(make_phantom(derive_seed(seed, {i}), 8), random_orientation(rng), L);
        const auto back = from_polar(to_polar(x, grid), grid);
        double sq = 0.0;
        for (std::size_t p = 0; p < x.data.size(); ++p) {
            sq += (back.data[p] - x.data[p]) * (back.data[p] - x.data[p]);
            sum_ref += x.data[p] * x.data[p];
        }
        sum_sq += sq;
        worst = std::max(worst, std::sqrt(sq / double(x.data.size())));
    }
    json checks = json::array();
    checks.push_back(at_most("roundtrip RMSE (worst of " + std::to_string(images) + " projections)", worst, 1e-3));
    checks.back()["relative_error"] = std::sqrt(sum_sq / sum_ref);
    const auto phi = phi_kernel(L, 1.0 / double(L));
    double mass = 0.0;
    for (double v : phi.data) mass += v;
    checks.push_back(at_most("|sum phi - 1| at b = 1/L", std::abs(mass - 1.0), 1e-3));
    const double norm = operator_norm_estimate(grid, 50);
    checks.push_back(entry("operator norm in [0.9, 1.1]", norm, 1.1, norm >= 0.9 && norm <= 1.1));
    json r = report("roundtrip", std::move(checks));
    r["L"] = L;
    return r;
}

json check_equivariance(std::size_t L, std::size_t cases, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    double conv = 0.0, norm = 0.0, act = 0.0, block = 0.0;
    for (std::size_t c = 0; c < cases; ++c) {
        const std::size_t C = 2 * (1 + rng() % 2), N = 3 + rng() % 4, M = 8 * (1 + rng() % 3);
        const long shift = static_cast<long>(rng() % M);
        const auto z = random_polar<double>(C, N, M, rng);
        const auto zs = angular_shift(z, shift);

        AngularFilter<double> h(C, C, N, 1 + rng() % 2, 1 + rng() % 2);
        h.initialize(rng);
        for (auto& b : h.bias) b = std::normal_distribution<double>()(rng);
        conv = std::max(conv, rel_diff(angular_conv_forward(zs, h).data, angular_shift(angular_conv_forward(z, h), shift).data));

        GroupNormParams<double> gn(C, 2);
        for (auto& g : gn.gamma) g = std::normal_distribution<double>(1.0, 0.3)(rng);
        for (auto& b : gn.beta) b = std::normal_distribution<double>(0.0, 0.3)(rng);
        norm = std::max(norm, rel_diff(group_norm(zs, gn).data, angular_shift(group_norm(z, gn), shift).data));
        act = std::max(act, rel_diff(relu(zs).data, angular_shift(relu(z), shift).data));

        // attention block with a different shift per image
        const std::size_t K = 1 + rng() % 3;
        const ConvStackSpec spec{.in_channels = C, .hidden_channels = 4, .out_channels = 4, .depth = 2, .N = N,
                                 .Q = 1, .W = 1, .groups = 2, .final_activation = false};
        const auto key = random_stack(spec, rng);
        const auto query = random_stack(spec, rng);
        PolarImageSet<double> set, shifted;
        std::vector<long> shifts;
        for (std::size_t k = 0; k < K; ++k) {
            set.push_back(random_polar<double>(C, N, M, rng));
            shifts.push_back(static_cast<long>(rng() % M));
            shifted.push_back(angular_shift(set.back(), shifts.back()));
        }
        const AttentionNets<double> nets{&key, &query, nullptr};
        const auto out = angular_attention_block(set, nets);
        const auto out_s = angular_attention_block(shifted, nets);
        for (std::size_t k = 0; k < K; ++k)
            block = std::max(block, rel_diff(out_s[k].data, angular_shift(out[k], shifts[k]).data));
    }
    const std::string n = " (" + std::to_string(cases) + " cases)";
    json checks = json::array({at_most("angular_conv shift equivariance" + n, conv, 1e-5),
                               at_most("group_norm shift equivariance" + n, norm, 1e-5),
                               at_most("relu shift equivariance" + n, act, 1e-5),
                               at_most("attention block per-image shift equivariance" + n, block, 1e-5)});

    // the polar map turns grid-angle rotations into shifts only approximately
    const auto grid = build_grid({.L = L});
    double worst = 0.0;
    for (std::size_t p = 0; p < 4; ++p) {
        const auto phantom = make_phantom(derive_seed(seed, {7, p}), 8);
        const Mat3 O = random_orientation(rng);
        const auto base = to_polar(project(phantom, O, L), grid);
        for (std::size_t j = 1; j < 8; ++j) {
            const std::size_t ell = j * grid.M / 8;
            const double gamma = 2 * std::numbers::pi * double(ell) / double(grid.M);
            const auto rotated = to_polar(project(phantom, matmul(inplane_rotation(gamma), O), L), grid);
            worst = std::max(worst, rel_diff(rotated.data, angular_shift(base, static_cast<long>(ell)).data));
        }
    }
    checks.push_back(at_most("P R_gamma x vs S_l P x at multiples of M/8, L=" + std::to_string(L), worst, 0.02));
    return report("equivariance", std::move(checks));
}

json check_oracles(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    json checks = json::array();
    {
        auto params = GridParams{.L = 16};
        params.truncation = 40.0;
        const auto wide = build_grid(params);
        const auto grid = build_grid({.L = 16});
        const auto x = random_image<double>(16, rng);
        const auto z = random_polar<double>(1, grid.N, grid.M, rng);
        checks.push_back(at_most("to_polar fast vs naive, double, truncation 40",
                                 rel_diff(to_polar(x, wide).data, to_polar(x, wide, GriddingPath::naive).data), 1e-10));
        checks.push_back(at_most(
            "polar_adjoint fast vs naive, double, truncation 40",
            rel_diff(polar_adjoint(z, wide).data, polar_adjoint(z, wide, GriddingPath::naive).data), 1e-10));
        checks.push_back(at_most("to_polar fast vs naive, double, default truncation",
                                 rel_diff(to_polar(x, grid).data, to_polar(x, grid, GriddingPath::naive).data), 1e-6));
        const auto xf = cast_image<float>(x);
        checks.push_back(at_most("to_polar fast (single) vs naive (double)",
                                 rel_diff(to_polar(xf, grid).data, to_polar(x, grid, GriddingPath::naive).data), 1e-6));
    }
    {
        const std::size_t K = 3, C = 2, N = 4, M = 16;
        PolarImageSet<double> q, k, v;
        for (std::size_t i = 0; i < K; ++i) {
            q.push_back(random_polar<double>(C, N, M, rng));
            k.push_back(random_polar<double>(C, N, M, rng));
            v.push_back(random_polar<double>(C, N, M, rng));
        }
        AngularTensor<double> naive(K, M);
        const double scale = 1.0 / std::sqrt(double(C * N * M));
        for (std::size_t a = 0; a < K; ++a)
            for (std::size_t b = 0; b < K; ++b)
                for (std::size_t l = 0; l < M; ++l) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t n = 0; n < N; ++n)
                            for (std::size_t m = 0; m < M; ++m) s += q[a](c, n, m) * k[b](c, n, (m + M - l) % M);
                    naive(a, b, l) = scale * s;
                }
        checks.push_back(at_most("attention scores FFT vs naive, double", rel_diff(attention_scores(q, k).data, naive.data), 1e-10));
        const auto alpha = attention_softmax(naive);
        PolarImageSet<double> applied(K, PolarImage<double>(C, N, M));
        for (std::size_t a = 0; a < K; ++a)
            for (std::size_t b = 0; b < K; ++b)
                for (std::size_t l = 0; l < M; ++l)
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t n = 0; n < N; ++n)
                            for (std::size_t m = 0; m < M; ++m)
                                applied[a](c, n, m) += alpha(a, b, l) * v[b](c, n, (m + M - l) % M);
        const auto fast = attention_apply(alpha, v);
        double worst = 0.0;
        for (std::size_t a = 0; a < K; ++a) worst = std::max(worst, rel_diff(fast[a].data, applied[a].data));
        checks.push_back(at_most("attention apply FFT vs naive, double", worst, 1e-10));

        PolarImageSet<float> qf, kf;
        for (std::size_t i = 0; i < K; ++i) {
            qf.push_back(cast_image<float>(q[i]));
            kf.push_back(cast_image<float>(k[i]));
        }
        checks.push_back(at_most("attention scores FFT (single) vs naive (double)",
                                 rel_diff(attention_scores(qf, kf).data, naive.data), 1e-6));
    }
    return report("oracles", std::move(checks));
}

json check_grads(const std::string& model, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    json checks = json::array();
    if (model == "layers") {
        // conv -> group norm -> relu, twice, through a linear probe
        const ConvStackSpec spec{.in_channels = 2, .hidden_channels = 4, .out_channels = 4, .depth = 2, .N = 5, .Q = 2,
                                 .W = 1, .groups = 2, .final_activation = true};
        auto stack = random_stack(spec, rng);
        const auto z = random_polar<double>(2, 5, 16, rng);
        const auto u = random_polar<double>(4, 5, 16, rng);
        auto loss = [&] {
            const auto y = stack.forward(z);
            double s = 0.0;
            for (std::size_t i = 0; i < y.data.size(); ++i) s += y.data[i] * u.data[i];
            return s;
        };
        ConvStack<double> grads(spec);
        grads.zero();
        typename ConvStack<double>::Tape tape;
        stack.forward(z, &tape);
        stack.backward(tape, u, grads);
        std::vector<ParamRef<double>> p, g;
        stack.collect("s", p);
        grads.collect("s", g);
        double worst = 0.0;
        std::size_t checked = 0;
        for (std::size_t t = 0; t < p.size(); ++t) {
            std::uniform_int_distribution<std::size_t> pick(0, p[t].values.size() - 1);
            for (int s = 0; s < 25; ++s) {
                const std::size_t i = pick(rng);
                if (g[t].values[i] == 0.0 && p[t].name.ends_with(".filter")) continue;  // off-band slot
                double& w = p[t].values[i];
                const double keep = w, h = 1e-6;
                w = keep + h;
                const double up = loss();
                w = keep - h;
                const double down = loss();
                w = keep;
                const double fd = (up - down) / (2 * h);
                worst = std::max(worst, std::abs(fd - g[t].values[i]) / std::max({std::abs(fd), std::abs(g[t].values[i]), 1e-6}));
                ++checked;
            }
        }
        checks.push_back(at_most("conv/group_norm/relu stack vs finite differences", worst, 1e-4));
        checks.back()["checked"] = checked;
        return report("grads", std::move(checks));
    }
    ModelKind kind;
    double tolerance;
    if (model == "tiny-cnn") {
        kind = ModelKind::polar_cnn;
        tolerance = 1e-4;
    } else if (model == "tiny-transformer") {
        kind = ModelKind::polar_transformer;
        tolerance = 1e-3;
    } else {
        throw std::invalid_argument("unknown grad-check model '" + model + "' (tiny-cnn, tiny-transformer, layers)");
    }
    PolarModel<double> m(tiny_config(kind));
    m.initialize(seed);
    {
        std::vector<ParamRef<double>> refs;
        m.collect(refs);
        std::normal_distribution<double> d(0.0, 0.1);
        for (auto& r : refs)
            if (!r.name.ends_with(".filter"))
                for (auto& v : r.values) v += d(rng);
    }
    const std::size_t K = kind == ModelKind::polar_cnn ? 1 : 2;
    std::vector<std::vector<CartesianImage<double>>> in(2), tg(2);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t k = 0; k < K; ++k) {
            in[b].push_back(random_image<double>(16, rng));
            tg[b].push_back(random_image<double>(16, rng));
        }
    const auto r = grad_check(m, in, tg, 1e-5, 200, seed);
    checks.push_back(at_most(model + " full model vs finite differences", r.max_rel_error, tolerance));
    checks.back()["checked"] = r.checked;
    checks.back()["worst_parameter"] = r.worst_parameter;
    return report("grads", std::move(checks));
}

json check_noise(std::uint64_t seed) {
    json checks = json::array();
    const double power = 1.0, snr = 0.5, S = 1.0, sigma = S / std::sqrt(snr);
    const auto y = add_poisson_noise(CartesianImage<double>(500), snr, 0.3 * S, power, derive_seed(seed, {1}));
    double mean = 0.0, sq = 0.0;
    for (double v : y.data) mean += v;
    mean /= double(y.data.size());
    for (double v : y.data) sq += (v - mean) * (v - mean);
    const double sd = std::sqrt(sq / double(y.data.size() - 1));
    checks.push_back(at_most("Poisson background |mean| / sigma", std::abs(mean) / sigma, 0.02));
    checks.push_back(at_most("Poisson background |std / sigma - 1|", std::abs(sd / sigma - 1.0), 0.02));

    const auto g = add_poisson_noise(CartesianImage<double>(317), snr, 1e-3 * S, power, derive_seed(seed, {2}));
    std::vector<double> v(g.data);
    std::sort(v.begin(), v.end());
    double ks = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double F = normal_cdf(v[i] / sigma);
        ks = std::max({ks, std::abs(F - double(i) / double(v.size())), std::abs(F - double(i + 1) / double(v.size()))});
    }
    checks.push_back(at_most("Poisson eta -> 0 Kolmogorov-Smirnov distance to N(0, sigma^2)", ks, 0.01));

    DatasetSpec spec;
    spec.task = Task::single;
    spec.n_phantoms = 100;
    spec.views_per_phantom = 5;
    spec.seed = seed;
    const auto data = generate_dataset(spec);
    NoiseSpec noise;
    noise.snr = 0.1;
    std::vector<CartesianImage<double>> noisy, clean;
    for (std::size_t i = 0; i < data.sets.size(); ++i) {
        clean.push_back(data.sets[i].images[0]);
        noisy.push_back(corrupt(clean.back(), noise, data.signal_power, derive_seed(seed, {3, i})));
    }
    const double r = relative_mse(noisy, clean);
    checks.push_back(entry("identity relative MSE at SNR 0.1 in [8, 12]", r, 12.0, r >= 8.0 && r <= 12.0));
    return report("noise", std::move(checks));
}

const std::vector<std::string>& check_suites() {
    static const std::vector<std::string> suites{"quadrature", "roundtrip", "equivariance", "oracles", "grads", "noise"};
    return suites;
}

json run_check(const std::string& suite, std::size_t L, std::uint64_t seed, const std::string& model) {
    if (suite == "quadrature") return check_quadrature();
    if (suite == "roundtrip") return check_roundtrip(L, 20, seed);
    if (suite == "equivariance") return check_equivariance(L, 100, seed);
    if (suite == "oracles") return check_oracles(seed);
    if (suite == "grads") return check_grads(model, seed);
    if (suite == "noise") return check_noise(seed);
    if (suite == "all") {
        json suites = json::array();
        bool pass = true;
        for (const auto& s : check_suites()) {
            if (s == "grads") {
                for (const char* m : {"layers", "tiny-cnn", "tiny-transformer"}) suites.push_back(check_grads(m, seed));
            } else {
                suites.push_back(run_check(s, L, seed, model));
            }
        }
        for (const auto& s : suites) pass = pass && s.at("pass").get<bool>();
        return {{"suite", "all"}, {"pass", pass}, {"suites", suites}};
    }
    throw std::invalid_argument("unknown check suite '" + suite + "'");
}

std::vector<BenchRow> bench_polar(const std::vector<std::size_t>& sizes, std::size_t repeats, std::uint64_t seed) {
    if (repeats == 0) throw std::invalid_argument("bench: repeats must be positive");
    std::mt19937_64 rng(seed);
    std::vector<BenchRow> rows;
    auto median_time = [&](const auto& op) {
        std::vector<double> t;
        op();  // warm-up
        for (std::size_t r = 0; r < repeats; ++r) {
            const auto start = std::chrono::steady_clock::now();
            op();
            t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
        }
        std::sort(t.begin(), t.end());
        return t.size() % 2 ? t[t.size() / 2] : 0.5 * (t[t.size() / 2 - 1] + t[t.size() / 2]);
    };
    for (std::size_t L : sizes) {
        const auto grid = build_grid({.L = L});
        const auto x = random_image<float>(L, rng);
        const auto z = random_polar<float>(1, grid.N, grid.M, rng);
        rows.push_back({"to_polar", L, median_time([&] { (void)to_polar(x, grid); }), repeats});
        rows.push_back({"polar_adjoint", L, median_time([&] { (void)polar_adjoint(z, grid); }), repeats});
        rows.push_back({"from_polar", L, median_time([&] { (void)from_polar(z, grid); }), repeats});
        PolarImageSet<float> set;
        for (int k = 0; k < 8; ++k) set.push_back(random_polar<float>(8, grid.N, grid.M, rng));
        rows.push_back({"attention", L, median_time([&] { (void)attention_apply(attention_softmax(attention_scores(set, set)), set); }),
                        repeats});
    }
    return rows;
}

}  // namespace ptdn
