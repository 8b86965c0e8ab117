#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

#include "ptdn/models.hpp"
#include "ptdn/parallel.hpp"
#include "ptdn/simdata.hpp"
#include "test_util.hpp"

using namespace ptdn;
using namespace ptdn::testing;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_cnn() {
    ModelConfig c;
    c.L = 16;
    c.N = 8;
    c.M = 32;
    c.depth = 3;
    c.channels = 4;
    c.Q = 2;
    c.W = 1;
    c.groups = 2;
    return c;
}

ModelConfig tiny_transformer() {
    ModelConfig c;
    c.kind = ModelKind::polar_transformer;
    c.L = 16;
    c.N = 8;
    c.M = 32;
    c.pre_depth = c.attn_depth = c.post_depth = 2;
    c.pre_channels = c.attn_channels = c.post_channels = 2;
    c.groups = 2;
    c.Q = 2;
    c.W = 1;
    c.K = 2;
    return c;
}

// Counts banded (n, p) pairs by enumeration.
std::size_t count_pairs(std::size_t N, std::size_t W) {
    std::size_t pairs = 0;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < N; ++p)
            if ((n > p ? n - p : p - n) <= W) ++pairs;
    return pairs;
}

std::size_t stack_count(std::size_t cin, std::size_t hidden, std::size_t cout, std::size_t depth, bool final_act,
                        std::size_t N, std::size_t Q, std::size_t W) {
    std::size_t total = 0;
    for (std::size_t i = 0; i < depth; ++i) {
        const std::size_t a = i == 0 ? cin : hidden, b = i + 1 == depth ? cout : hidden;
        total += b * a * (2 * Q + 1) * count_pairs(N, W) + b;
        if (i + 1 < depth || final_act) total += 2 * b;
    }
    return total;
}

// Quarter-turn counterclockwise rotations of a raster, (R f)(p) = f(R^{-1} p). Pixels whose
// preimage falls off the raster (the first row/column) are set to zero.
CartesianImage<double> quarter_turns(const CartesianImage<double>& x, int turns) {
    CartesianImage<double> out = x;
    const std::size_t L = x.L;
    for (int t = 0; t < ((turns % 4) + 4) % 4; ++t) {
        CartesianImage<double> next(L);
        for (std::size_t a = 1; a < L; ++a)
            for (std::size_t b = 0; b < L; ++b) next(a, b) = out(b, L - a);
        out = std::move(next);
    }
    return out;
}

// Zeroes the first row and column, which quarter turns cannot reach.
CartesianImage<double> crop_edge(CartesianImage<double> x) {
    for (std::size_t i = 0; i < x.L; ++i) x(0, i) = x(i, 0) = 0.0;
    return x;
}

std::vector<char> read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<char>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

fs::path temp_path(const std::string& name) { return fs::temp_directory_path() / ("ptdn_models_" + name); }

// Rewrites the JSON manifest of a weights file through edit().
template <typename F>
void edit_manifest(const fs::path& p, F edit) {
    auto bytes = read_bytes(p);
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= std::uint64_t(static_cast<unsigned char>(bytes[i])) << (8 * i);
    auto manifest = nlohmann::json::parse(std::string(bytes.begin() + 8, bytes.begin() + 8 + static_cast<long>(len)));
    edit(manifest);
    const std::string text = manifest.dump();
    std::vector<char> out(8);
    for (int i = 0; i < 8; ++i) out[i] = static_cast<char>((text.size() >> (8 * i)) & 0xff);
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), bytes.begin() + 8 + static_cast<long>(len), bytes.end());
    write_bytes(p, out);
}

std::string load_error(const fs::path& p) {
    try {
        load_weights<double>(p);
    } catch (const WeightsError& e) {
        return e.what();
    }
    return "";
}

// Perturbs biases and norm offsets away from their zero init so every path carries gradient.
template <typename T>
void perturb(PolarModel<T>& model, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, 0.1);
    std::vector<ParamRef<T>> refs;
    model.collect(refs);
    for (auto& r : refs)
        if (!r.name.ends_with(".filter"))
            for (auto& v : r.values) v += static_cast<T>(d(rng));
}

double linear_loss(const PolarModel<double>& model, const std::vector<CartesianImage<double>>& xs,
                   const std::vector<CartesianImage<double>>& u) {
    const auto out = model.forward(xs);
    double s = 0.0;
    for (std::size_t k = 0; k < out.size(); ++k) s += dot(out[k].data, u[k].data);
    return s;
}

// Worst relative error between analytic and central-difference gradients over a sample of parameters.
double model_fd_error(PolarModel<double>& model, const std::vector<CartesianImage<double>>& xs, std::uint64_t seed,
                      std::size_t samples_per_tensor) {
    std::mt19937_64 rng(seed);
    std::vector<CartesianImage<double>> u;
    for (std::size_t k = 0; k < xs.size(); ++k) u.push_back(random_image<double>(xs[k].L, rng));
    PolarModel<double> grads(model.config());
    grads.zero();
    ModelTape<double> tape;
    model.forward(xs, &tape);
    model.backward(tape, u, grads);

    std::vector<ParamRef<double>> refs, grefs;
    model.collect(refs);
    grads.collect(grefs);
    double worst = 0.0;
    const double h = 1e-5;
    for (std::size_t t = 0; t < refs.size(); ++t) {
        std::uniform_int_distribution<std::size_t> pick(0, refs[t].values.size() - 1);
        for (std::size_t s = 0; s < samples_per_tensor; ++s) {
            const std::size_t i = pick(rng);
            const double keep = refs[t].values[i];
            refs[t].values[i] = keep + h;
            const double up = linear_loss(model, xs, u);
            refs[t].values[i] = keep - h;
            const double down = linear_loss(model, xs, u);
            refs[t].values[i] = keep;
            const double fd = (up - down) / (2 * h);
            const double an = grefs[t].values[i];
            worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-4}));
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("config validation and json") {
    ModelConfig c;
    CHECK_NOTHROW(c.validate());
    c.channels = 6;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = ModelConfig{};
    c.depth = 0;
    CHECK_THROWS_AS(PolarModel<float>{c}, std::invalid_argument);

    const auto t = tiny_transformer();
    const auto back = model_config_from_json(to_json(t));
    CHECK(to_json(back) == to_json(t));
    auto j = to_json(t);
    j["chanels"] = 3;
    CHECK_THROWS_AS(model_config_from_json(j), std::invalid_argument);
    j = to_json(t);
    j["kind"] = "resnet";
    CHECK_THROWS_AS(model_config_from_json(j), std::invalid_argument);
    j = to_json(t);
    j["Q"] = "five";
    CHECK_THROWS_AS(model_config_from_json(j), std::invalid_argument);
}

TEST_CASE("parameter counts match an independent count") {
    const ModelConfig ref;  // 25 layers, C = 8, Q = W = 5 at L = 64
    const PolarModel<float> cnn(ref);
    CHECK(cnn.parameter_count() == stack_count(1, 8, 1, 25, false, 64, 5, 5));
    // hand count: pairs = 64*11 - 30 = 674, taps 11 -> 7414 per channel pair
    CHECK(count_pairs(64, 5) == 674);
    CHECK(cnn.parameter_count() == 7414 * (8 + 23 * 64 + 8) + 24 * 24 + 1);

    ModelConfig tc = ref;
    tc.kind = ModelKind::polar_transformer;
    const PolarModel<float> tr(tc);
    CHECK(tr.parameter_count() == stack_count(1, 8, 8, 5, true, 64, 5, 5) + stack_count(8, 16, 16, 17, false, 64, 5, 5) +
                                      stack_count(8, 8, 1, 9, false, 64, 5, 5));

    // the collected tensors cover exactly the counted parameters on the band
    PolarModel<float> m(tiny_transformer());
    std::vector<ParamRef<float>> refs;
    m.collect(refs);
    std::size_t stored = 0;
    for (const auto& r : refs) stored += r.values.size();
    CHECK(stored >= m.parameter_count());
}

TEST_CASE("degenerate single-layer model is a scaled polar image plus bias") {
    ModelConfig c = tiny_cnn();
    c.depth = 1;
    c.channels = 1;
    c.groups = 1;
    c.Q = c.W = 0;
    PolarModel<double> model(c);
    model.initialize(3);
    std::vector<ParamRef<double>> refs;
    model.collect(refs);
    REQUIRE(refs.size() == 2);
    CHECK(refs[0].values.size() == c.N);
    std::mt19937_64 rng(4);
    std::normal_distribution<double> gauss;
    for (auto& v : refs[0].values) v = gauss(rng);
    refs[1].values[0] = 0.3;

    const auto x = random_image<double>(c.L, rng);
    auto z = to_polar(x, model.grid());
    for (std::size_t n = 0; n < z.N; ++n)
        for (std::size_t m = 0; m < z.M; ++m) z(0, n, m) = refs[0].values[n] * z(0, n, m) + 0.3;
    const auto expected = from_polar(z, model.grid());
    CHECK(rel_error(forward_single(model, x).data, expected.data) <= 1e-12);
}

TEST_CASE("zero image with zero biases maps to zero") {
    for (auto c : {tiny_cnn(), tiny_transformer()}) {
        PolarModel<double> model(c);
        model.initialize(8);
        const auto out = model.forward({CartesianImage<double>(c.L), CartesianImage<double>(c.L)});
        for (const auto& y : out)
            for (double v : y.data) CHECK(v == 0.0);
    }
}

TEST_CASE("forward is deterministic across calls and thread counts") {
    for (auto c : {tiny_cnn(), tiny_transformer()}) {
        PolarModel<float> model(c);
        model.initialize(11);
        perturb(model, 12);
        std::mt19937_64 rng(13);
        std::vector<CartesianImage<float>> xs;
        for (int k = 0; k < 3; ++k) xs.push_back(random_image<float>(c.L, rng));
        set_thread_count(1);
        const auto a = model.forward(xs);
        const auto b = model.forward(xs);
        set_thread_count(3);
        const auto d = model.forward(xs);
        set_thread_count(1);
        for (std::size_t k = 0; k < xs.size(); ++k) {
            CHECK(a[k].data == b[k].data);
            CHECK(a[k].data == d[k].data);
        }
    }
}

TEST_CASE("input validation") {
    PolarModel<float> cnn(tiny_cnn());
    CHECK_THROWS_AS(forward_single(cnn, CartesianImage<float>(12)), std::invalid_argument);
    CHECK_THROWS_AS(cnn.forward({}), std::invalid_argument);
    CHECK_THROWS_AS(forward_set(cnn, {CartesianImage<float>(16)}), std::invalid_argument);
    CHECK_THROWS_AS(cnn.attention({CartesianImage<float>(16)}), std::invalid_argument);
    PolarModel<float> tr(tiny_transformer());
    CHECK_THROWS_AS(forward_set(tr, {CartesianImage<float>(16), CartesianImage<float>(12)}), std::invalid_argument);
}

TEST_CASE("key and query share weights") {
    auto c = tiny_transformer();
    PolarModel<double> model(c);
    model.initialize(5);
    perturb(model, 6);
    std::mt19937_64 rng(7);
    std::vector<CartesianImage<double>> xs{random_image<double>(c.L, rng), random_image<double>(c.L, rng)};
    ModelTape<double> tape;
    model.forward(xs, &tape);
    REQUIRE(tape.attention.size() == 1);
    for (std::size_t k = 0; k < xs.size(); ++k) CHECK(tape.attention[0].keys[k].data == tape.attention[0].queries[k].data);

    std::vector<ParamRef<double>> refs;
    model.collect(refs);
    std::size_t kq = 0;
    for (const auto& r : refs) kq += r.name.starts_with("keyquery.");
    CHECK(kq == 2 * 2 + 2);  // two filters + biases, one norm pair

    c.attention_blocks = 2;
    PolarModel<double> shared(c);
    c.share_block_weights = false;
    PolarModel<double> separate(c);
    CHECK(separate.parameter_count() - shared.parameter_count() == shared.key_query(0).parameter_count());
    CHECK(&shared.key_query(0) == &shared.key_query(1));
    CHECK(&separate.key_query(0) != &separate.key_query(1));
}

TEST_CASE("single-image sets and set bookkeeping") {
    const auto c = tiny_transformer();
    PolarModel<double> model(c);
    model.initialize(21);
    perturb(model, 22);
    std::mt19937_64 rng(23);
    const auto x = random_image<double>(c.L, rng);
    const auto one = forward_set(model, {x});
    REQUIRE(one.size() == 1);
    CHECK(one[0].L == c.L);
    const auto alpha = model.attention({x});
    double mass = 0.0;
    for (double a : alpha.data) mass += a;
    CHECK(mass == doctest::Approx(1.0));

    // identical copies -> identical outputs; permutations permute the outputs
    const auto copies = forward_set(model, {x, x, x, x});
    REQUIRE(copies.size() == 4);
    for (const auto& y : copies) CHECK(y.data == copies[0].data);
    std::vector<CartesianImage<double>> xs;
    for (int k = 0; k < 5; ++k) xs.push_back(random_image<double>(c.L, rng));
    const auto out = forward_set(model, xs);
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    std::vector<CartesianImage<double>> permuted;
    for (auto p : perm) permuted.push_back(xs[p]);
    const auto pout = forward_set(model, permuted);
    for (std::size_t i = 0; i < perm.size(); ++i) CHECK(rel_error(pout[i].data, out[perm[i]].data) <= 1e-12);
}

TEST_CASE("quarter-turn rotation oracle") {
    std::mt19937_64 rng(1);
    const auto ph = make_phantom(2, 6);
    const Mat3 O = random_orientation(rng);
    const auto x = project(ph, O, 24);
    for (int t = 1; t < 4; ++t) {
        const auto analytic = project(ph, matmul(inplane_rotation(t * std::numbers::pi / 2), O), 24);
        CHECK(rel_error(crop_edge(quarter_turns(x, t)).data, crop_edge(analytic).data) <= 1e-10);
    }
}

TEST_CASE("polar CNN commutes with grid-angle rotations") {
    ModelConfig c;
    c.L = 32;
    c.depth = 5;
    c.channels = 8;
    c.Q = 3;
    c.W = 3;
    PolarModel<double> model(c);
    model.initialize(31);
    perturb(model, 32);
    std::mt19937_64 rng(33);
    double worst = 0.0;
    for (int trial = 0; trial < 3; ++trial) {
        const auto ph = make_phantom(100 + trial, 8);
        const Mat3 O = random_orientation(rng);
        const auto fx = forward_single(model, project(ph, O, c.L));
        for (int t = 1; t < 4; ++t) {
            const auto rotated_in = project(ph, matmul(inplane_rotation(t * std::numbers::pi / 2), O), c.L);
            const auto lhs = crop_edge(forward_single(model, rotated_in));
            worst = std::max(worst, rel_error(lhs.data, crop_edge(quarter_turns(fx, t)).data));
        }
    }
    MESSAGE("worst relative error " << worst);
    CHECK(worst <= 0.03);
}

TEST_CASE("polar transformer is equivariant to per-image rotations") {
    ModelConfig c;
    c.kind = ModelKind::polar_transformer;
    c.L = 32;
    c.pre_depth = 2;
    c.attn_depth = 3;
    c.post_depth = 2;
    c.Q = 3;
    c.W = 3;
    PolarModel<double> model(c);
    model.initialize(41);
    perturb(model, 42);
    std::mt19937_64 rng(43);
    const auto ph = make_phantom(7, 8);
    std::vector<Mat3> views;
    std::vector<CartesianImage<double>> xs, rotated;
    const std::vector<int> turns{1, 3, 2};
    for (int k = 0; k < 3; ++k) {
        views.push_back(random_orientation(rng));
        xs.push_back(project(ph, views[k], c.L));
        rotated.push_back(project(ph, matmul(inplane_rotation(turns[k] * std::numbers::pi / 2), views[k]), c.L));
    }
    const auto fx = forward_set(model, xs);
    const auto frx = forward_set(model, rotated);
    for (int k = 0; k < 3; ++k) {
        const double err = rel_error(crop_edge(frx[k]).data, crop_edge(quarter_turns(fx[k], turns[k])).data);
        MESSAGE("image " << k << " relative error " << err);
        CHECK(err <= 0.03);
    }
}

TEST_CASE("weights save, load and save again byte-identically") {
    for (auto c : {tiny_cnn(), tiny_transformer()}) {
        PolarModel<double> model(c);
        model.initialize(51);
        perturb(model, 52);
        const auto a = temp_path("a.bin"), b = temp_path("b.bin");
        save_weights(model, a);
        auto loaded = load_weights<double>(a);
        save_weights(loaded, b);
        CHECK(read_bytes(a) == read_bytes(b));
        CHECK(to_json(read_weights_config(a)) == to_json(c));
        std::mt19937_64 rng(53);
        const std::vector<CartesianImage<double>> xs{random_image<double>(c.L, rng), random_image<double>(c.L, rng)};
        const auto ya = model.forward(xs), yb = loaded.forward(xs);
        CHECK(ya[0].data == yb[0].data);
        CHECK(ya[1].data == yb[1].data);
        fs::remove(a);
        fs::remove(b);
    }
}

TEST_CASE("weights load errors are descriptive") {
    PolarModel<double> model(tiny_cnn());
    model.initialize(61);
    const auto p = temp_path("w.bin");
    save_weights(model, p);
    const auto full = read_bytes(p);
    std::vector<ParamRef<double>> refs;
    model.collect(refs);

    // cut inside the third tensor
    std::size_t len = 0;
    for (int i = 0; i < 8; ++i) len |= std::size_t(static_cast<unsigned char>(full[i])) << (8 * i);
    std::size_t offset = 8 + len;
    for (int t = 0; t < 2; ++t) offset += 8 + 8 * refs[t].shape.size() + 8 * refs[t].values.size();
    write_bytes(p, {full.begin(), full.begin() + static_cast<long>(offset + 5)});
    auto msg = load_error(p);
    CHECK(msg.find("truncated") != std::string::npos);
    CHECK(msg.find("'" + refs[2].name + "'") != std::string::npos);

    write_bytes(p, {full.begin(), full.begin() + 20});
    CHECK(load_error(p).find("manifest") != std::string::npos);

    write_bytes(p, full);
    edit_manifest(p, [](nlohmann::json& m) { m["config"]["channels"] = 2; });
    msg = load_error(p);
    CHECK(msg.find("shape mismatch in layer 'cnn.layer0.filter'") != std::string::npos);

    write_bytes(p, full);
    edit_manifest(p, [](nlohmann::json& m) { m["format"] = "other"; });
    CHECK(load_error(p).find("corrupt manifest") != std::string::npos);

    auto extra = full;
    extra.push_back('x');
    write_bytes(p, extra);
    CHECK(load_error(p).find("trailing") != std::string::npos);
    fs::remove(p);
}

TEST_CASE("full-model gradients match finite differences") {
    SUBCASE("polar CNN") {
        PolarModel<double> model(tiny_cnn());
        model.initialize(71);
        perturb(model, 72);
        std::mt19937_64 rng(73);
        const double err = model_fd_error(model, {random_image<double>(16, rng)}, 74, 12);
        MESSAGE("max relative error " << err);
        CHECK(err <= 1e-4);
    }
    SUBCASE("polar transformer, K = 2") {
        PolarModel<double> model(tiny_transformer());
        model.initialize(81);
        perturb(model, 82);
        std::mt19937_64 rng(83);
        const double err = model_fd_error(model, {random_image<double>(16, rng), random_image<double>(16, rng)}, 84, 12);
        MESSAGE("max relative error " << err);
        CHECK(err <= 1e-3);
    }
}
