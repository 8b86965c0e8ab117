#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "ptdn/attention.hpp"
#include "test_util.hpp"

using namespace ptdn;
using namespace ptdn::testing;

namespace {

template <typename T>
PolarImageSet<T> random_set(std::size_t K, std::size_t C, std::size_t N, std::size_t M, std::mt19937_64& rng) {
    PolarImageSet<T> set;
    for (std::size_t k = 0; k < K; ++k) set.push_back(random_polar<T>(C, N, M, rng));
    return set;
}

std::size_t wrap(long i, std::size_t M) {
    const long m = static_cast<long>(M);
    return static_cast<std::size_t>(((i % m) + m) % m);
}

AngularTensor<double> naive_scores(const PolarImageSet<double>& q, const PolarImageSet<double>& key) {
    const std::size_t K = q.size(), C = q[0].C, N = q[0].N, M = q[0].M;
    AngularTensor<double> s(K, M);
    const double scale = 1.0 / std::sqrt(double(C * N * M));
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t kp = 0; kp < K; ++kp)
            for (std::size_t l = 0; l < M; ++l) {
                double acc = 0.0;
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t m = 0; m < M; ++m)
                            acc += q[k](c, n, m) * key[kp](c, n, wrap(long(m) - long(l), M));
                s(k, kp, l) = scale * acc;
            }
    return s;
}

PolarImageSet<double> naive_apply(const AngularTensor<double>& a, const PolarImageSet<double>& v) {
    const std::size_t K = v.size(), C = v[0].C, N = v[0].N, M = v[0].M;
    PolarImageSet<double> out(K, PolarImage<double>(C, N, M));
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t kp = 0; kp < K; ++kp)
            for (std::size_t l = 0; l < M; ++l) {
                const auto shifted = angular_shift(v[kp], long(l));
                for (std::size_t i = 0; i < shifted.data.size(); ++i) out[k].data[i] += a(k, kp, l) * shifted.data[i];
            }
    return out;
}

template <typename T>
std::vector<T> flatten(const PolarImageSet<T>& set) {
    std::vector<T> out;
    for (const auto& z : set) out.insert(out.end(), z.data.begin(), z.data.end());
    return out;
}

template <typename T>
ConvStack<T> make_stack(std::size_t cin, std::size_t hidden, std::size_t cout, std::size_t depth, std::size_t N,
                        bool final_activation, std::mt19937_64& rng) {
    ConvStackSpec spec{.in_channels = cin, .hidden_channels = hidden, .out_channels = cout, .depth = depth, .N = N,
                       .Q = 1, .W = 1, .groups = 1, .final_activation = final_activation};
    ConvStack<T> s(spec);
    s.initialize(rng);
    // perturb norm parameters and biases away from their defaults
    std::vector<ParamRef<T>> refs;
    s.collect("s", refs);
    std::normal_distribution<double> d(0.0, 0.1);
    for (auto& r : refs)
        if (r.name.ends_with("bias") || r.name.ends_with("beta"))
            for (auto& v : r.values) v = static_cast<T>(d(rng));
    return s;
}

}  // namespace

TEST_CASE("scores match the naive shifted inner products") {
    std::mt19937_64 rng(21);
    for (auto [K, C, N, M] : {std::array<std::size_t, 4>{2, 1, 3, 8}, {3, 2, 4, 16}, {1, 2, 2, 5}}) {
        const auto q = random_set<double>(K, C, N, M, rng), key = random_set<double>(K, C, N, M, rng);
        CHECK(rel_error(attention_scores(q, key).data, naive_scores(q, key).data) <= 1e-10);
    }
    const auto qf = random_set<float>(3, 2, 4, 16, rng), kf = random_set<float>(3, 2, 4, 16, rng);
    PolarImageSet<double> qd, kd;
    for (const auto& z : qf) qd.push_back(cast_image<double>(z));
    for (const auto& z : kf) kd.push_back(cast_image<double>(z));
    const auto sf = attention_scores(qf, kf);
    CHECK(rel_error(std::vector<double>(sf.data.begin(), sf.data.end()), naive_scores(qd, kd).data) <= 1e-6);
}

TEST_CASE("zero keys give zero scores; shifted keys peak at the shift") {
    std::mt19937_64 rng(22);
    auto q = random_set<double>(2, 2, 3, 16, rng);
    PolarImageSet<double> zero(2, PolarImage<double>(2, 3, 16));
    for (double v : attention_scores(q, zero).data) CHECK(v == 0.0);

    const double nq = norm(q[0].data);
    for (auto& v : q[0].data) v /= nq;
    for (long t : {0L, 3L, 11L}) {
        PolarImageSet<double> keys{angular_shift(q[0], t), q[1]};
        const auto s = attention_scores(PolarImageSet<double>{q[0]}, PolarImageSet<double>{keys[0]});
        const auto est = alignment_estimate(s, 0, 0);
        // key[m - l] = q[m - l - t], so the correlation peaks at l = -t mod M
        CHECK(est.index == wrap(-t, 16));
        CHECK(!est.degenerate);
    }
}

TEST_CASE("alignment of shifted copies recovers the shift angle") {
    std::mt19937_64 rng(23);
    const std::size_t M = 32;
    const auto q = random_set<double>(3, 1, 4, M, rng);
    const long shifts[3] = {5, 0, 17};
    PolarImageSet<double> keys;
    for (std::size_t k = 0; k < 3; ++k) keys.push_back(angular_shift(q[k], shifts[k]));
    const auto s = attention_scores(q, keys);
    for (std::size_t k = 0; k < 3; ++k) {
        // q_k[m] against key_k[m - l] = q_k[m - l - t]: peak where l = -t
        const auto est = alignment_estimate(s, k, k);
        CHECK(est.index == wrap(-shifts[k], M));
        CHECK(est.angle == doctest::Approx(2 * std::numbers::pi * double(wrap(-shifts[k], M)) / M));
        CHECK(est.profile.size() == M);
    }
}

TEST_CASE("softmax normalization, shift invariance and saturation") {
    AngularTensor<double> s(2, 8);
    auto a = attention_softmax(s);
    for (double v : a.data) CHECK(v == doctest::Approx(1.0 / 16).epsilon(1e-12));
    const auto uniform_summary = attention_summary(a);
    for (double v : uniform_summary) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
    const auto tie = alignment_estimate(a, 0, 1);
    CHECK(tie.degenerate);

    std::mt19937_64 rng(24);
    std::normal_distribution<double> d(0.0, 3.0);
    for (auto& v : s.data) v = d(rng);
    a = attention_softmax(s);
    auto shifted = s;
    for (std::size_t i = 0; i < 16; ++i) shifted.data[i] += 123.0;  // all of row k = 0
    const auto b = attention_softmax(shifted);
    CHECK(max_abs_diff(a.data, b.data) <= 1e-7);
    for (std::size_t k = 0; k < 2; ++k) {
        double row = 0.0;
        for (std::size_t i = 0; i < 16; ++i) {
            CHECK(a.data[k * 16 + i] >= 0.0);
            row += a.data[k * 16 + i];
        }
        CHECK(std::abs(row - 1.0) <= 1e-12);
    }
    const auto summary = attention_summary(a);
    CHECK(summary[0] + summary[1] == doctest::Approx(1.0));

    AngularTensor<float> sat(3, 8);
    sat(1, 2, 5) = 50.0f;
    const auto as = attention_softmax(sat);
    CHECK(as(1, 2, 5) >= 1.0f - 1e-6f);
}

TEST_CASE("apply: naive oracle, identity and convex combination") {
    std::mt19937_64 rng(25);
    for (auto [K, C, N, M] : {std::array<std::size_t, 4>{2, 1, 3, 8}, {3, 2, 4, 16}}) {
        AngularTensor<double> s(K, M);
        std::normal_distribution<double> d;
        for (auto& v : s.data) v = d(rng);
        const auto a = attention_softmax(s);
        const auto v = random_set<double>(K, C, N, M, rng);
        CHECK(rel_error(flatten(attention_apply(a, v)), flatten(naive_apply(a, v))) <= 1e-10);
    }

    const auto v = random_set<double>(3, 2, 3, 8, rng);
    AngularTensor<double> eye(3, 8);
    for (std::size_t k = 0; k < 3; ++k) eye(k, k, 0) = 1.0;
    CHECK(max_abs_diff(flatten(attention_apply(eye, v)), flatten(v)) <= 1e-14);

    PolarImageSet<double> flat(3, PolarImage<double>(1, 2, 8));
    std::uniform_real_distribution<double> u(-1, 1);
    for (auto& z : flat)
        for (std::size_t n = 0; n < 2; ++n) {
            const double c = u(rng);
            for (std::size_t m = 0; m < 8; ++m) z(0, n, m) = c;
        }
    AngularTensor<double> s(3, 8);
    std::normal_distribution<double> d;
    for (auto& x : s.data) x = d(rng);
    const auto a = attention_softmax(s);
    const auto A = attention_summary(a);
    const auto out = attention_apply(a, flat);
    for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t n = 0; n < 2; ++n) {
            double expected = 0.0;
            for (std::size_t kp = 0; kp < 3; ++kp) expected += A[k * 3 + kp] * flat[kp](0, n, 0);
            for (std::size_t m = 0; m < 8; ++m) CHECK(std::abs(out[k](0, n, m) - expected) <= 1e-12);
        }
}

TEST_CASE("shape mismatches are rejected") {
    std::mt19937_64 rng(26);
    auto q = random_set<double>(2, 1, 3, 8, rng);
    auto k = random_set<double>(2, 1, 3, 9, rng);
    CHECK_THROWS_AS(attention_scores(q, k), std::invalid_argument);
    auto k3 = random_set<double>(3, 1, 3, 8, rng);
    CHECK_THROWS_AS(attention_scores(q, k3), std::invalid_argument);
    CHECK_THROWS_AS(attention_apply(AngularTensor<double>(2, 8), k3), std::invalid_argument);
    q[1] = PolarImage<double>(2, 3, 8);
    CHECK_THROWS_AS(attention_scores(q, q), std::invalid_argument);
}

TEST_CASE("block: single angularly-constant image passes through the value net") {
    std::mt19937_64 rng(27);
    const auto shared = make_stack<float>(2, 4, 4, 2, 3, false, rng);
    const auto value = make_stack<float>(2, 2, 2, 1, 3, true, rng);
    PolarImage<float> z(2, 3, 8);
    std::uniform_real_distribution<float> u(-1, 1);
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t n = 0; n < 3; ++n) {
            const float x = u(rng);
            for (std::size_t m = 0; m < 8; ++m) z(c, n, m) = x;
        }
    const auto out = angular_attention_block(PolarImageSet<float>{z}, AttentionNets<float>{&shared, &shared, &value});
    CHECK(rel_error(out[0].data, value.forward(z).data) <= 1e-6);
    const auto id = angular_attention_block(PolarImageSet<float>{z}, AttentionNets<float>{&shared, &shared, nullptr});
    CHECK(rel_error(id[0].data, z.data) <= 1e-6);
}

TEST_CASE("block is equivariant to per-image angular shifts") {
    std::mt19937_64 rng(28);
    const std::size_t K = 4, N = 5, M = 16;
    const auto shared = make_stack<float>(3, 6, 6, 3, N, false, rng);
    const auto value = make_stack<float>(3, 3, 3, 2, N, true, rng);
    const AttentionNets<float> nets{&shared, &shared, &value};
    std::uniform_int_distribution<long> shift(0, long(M) - 1);
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        const auto z = random_set<float>(K, 3, N, M, rng);
        const auto base = angular_attention_block(z, nets);
        PolarImageSet<float> zs;
        std::vector<long> l(K);
        for (std::size_t k = 0; k < K; ++k) {
            l[k] = shift(rng);
            zs.push_back(angular_shift(z[k], l[k]));
        }
        const auto out = angular_attention_block(zs, nets);
        PolarImageSet<float> expected;
        for (std::size_t k = 0; k < K; ++k) expected.push_back(angular_shift(base[k], l[k]));
        worst = std::max(worst, rel_error(flatten(out), flatten(expected)));
    }
    CHECK(worst <= 1e-5);
}

TEST_CASE("block is equivariant to permutations of the set") {
    std::mt19937_64 rng(29);
    const auto shared = make_stack<float>(2, 4, 4, 2, 4, false, rng);
    const AttentionNets<float> nets{&shared, &shared, nullptr};
    const auto z = random_set<float>(4, 2, 4, 8, rng);
    const std::size_t perm[4] = {2, 0, 3, 1};
    PolarImageSet<float> zp;
    for (std::size_t k = 0; k < 4; ++k) zp.push_back(z[perm[k]]);
    const auto out = angular_attention_block(z, nets);
    const auto outp = angular_attention_block(zp, nets);
    for (std::size_t k = 0; k < 4; ++k) CHECK(rel_error(outp[k].data, out[perm[k]].data) <= 1e-6);

    // identical copies give identical outputs
    PolarImageSet<float> copies(3, z[0]);
    const auto oc = angular_attention_block(copies, nets);
    CHECK(oc[0].data == oc[1].data);
    CHECK(oc[1].data == oc[2].data);
}

TEST_CASE("block backward matches finite differences") {
    std::mt19937_64 rng(30);
    const std::size_t K = 2, C = 1, N = 3, M = 8;

    auto run = [&](bool shared_kq) {
        auto key = make_stack<double>(C, 2, 2, 2, N, false, rng);
        auto query = make_stack<double>(C, 2, 2, 2, N, false, rng);
        auto value = make_stack<double>(C, 1, C, 1, N, false, rng);
        auto z = random_set<double>(K, C, N, M, rng);
        const auto weights = random_set<double>(K, C, N, M, rng);
        AttentionNets<double> nets{&key, shared_kq ? &key : &query, &value};

        auto loss = [&] {
            const auto out = angular_attention_block(z, nets);
            double s = 0.0;
            for (std::size_t k = 0; k < K; ++k) s += dot(out[k].data, weights[k].data);
            return s;
        };

        AttentionTape<double> tape;
        angular_attention_block(z, nets, &tape);
        ConvStack<double> gk(key.spec()), gq(query.spec()), gv(value.spec());
        gk.zero();
        gq.zero();
        gv.zero();
        AttentionNetGrads<double> grads{&gk, shared_kq ? &gk : &gq, &gv};
        const auto gz = angular_attention_block_backward(tape, nets, weights, grads);

        auto fd = [&](double& p) {
            const double h = 1e-6, saved = p;
            p = saved + h;
            const double up = loss();
            p = saved - h;
            const double down = loss();
            p = saved;
            return (up - down) / (2 * h);
        };
        // the floor keeps round-off in the differences (~1e-10) from dominating exactly-zero gradients
        auto err = [](double a, double b) { return std::abs(a - b) / std::max(1e-5, std::max(std::abs(a), std::abs(b))); };

        double worst = 0.0;
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t i = 0; i < z[k].data.size(); ++i) worst = std::max(worst, err(gz[k].data[i], fd(z[k].data[i])));

        auto check_net = [&](ConvStack<double>& net, ConvStack<double>& g) {
            std::vector<ParamRef<double>> p, dp;
            net.collect("n", p);
            g.collect("n", dp);
            REQUIRE(p.size() == dp.size());
            for (std::size_t r = 0; r < p.size(); ++r)
                for (std::size_t i = 0; i < p[r].values.size(); ++i) {
                    const double numeric = fd(p[r].values[i]);
                    if (numeric == 0.0 && dp[r].values[i] == 0.0) continue;  // unused band slots
                    worst = std::max(worst, err(dp[r].values[i], numeric));
                }
        };
        check_net(key, gk);
        if (!shared_kq) check_net(query, gq);
        check_net(value, gv);
        return worst;
    };
    CHECK(run(true) <= 1e-4);
    CHECK(run(false) <= 1e-4);
}
