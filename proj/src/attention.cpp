#include "ptdn/attention.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

#include "ptdn/fft.hpp"

namespace ptdn {
namespace {

template <typename T>
using Spectrum = std::vector<std::complex<T>>;

template <typename T>
void check_set(const PolarImageSet<T>& set, const char* where) {
    if (set.empty()) throw std::invalid_argument(std::string(where) + ": empty image set");
    for (const auto& z : set)
        if (!z.same_shape(set.front()))
            throw std::invalid_argument(std::string(where) + ": image shapes differ (" + shape_string(z) + " vs " +
                                        shape_string(set.front()) + ")");
}

template <typename T>
void check_pair(const PolarImageSet<T>& a, const PolarImageSet<T>& b, const char* where) {
    check_set(a, where);
    check_set(b, where);
    if (a.size() != b.size() || !a.front().same_shape(b.front()))
        throw std::invalid_argument(std::string(where) + ": sets differ in size or image shape");
}

// Row spectra of one image: C * N rows of M / 2 + 1 bins.
template <typename T>
Spectrum<T> row_spectra(const PolarImage<T>& z) {
    const std::size_t F = z.M / 2 + 1;
    Spectrum<T> out(z.C * z.N * F);
    for (std::size_t r = 0; r < z.C * z.N; ++r)
        fft::rfft<T>(std::span<const T>(z.data.data() + r * z.M, z.M), std::span<std::complex<T>>(out.data() + r * F, F));
    return out;
}

template <typename T>
std::vector<Spectrum<T>> set_spectra(const PolarImageSet<T>& set) {
    std::vector<Spectrum<T>> out;
    out.reserve(set.size());
    for (const auto& z : set) out.push_back(row_spectra(z));
    return out;
}

// c[l] = scale * sum_rows sum_m a[m] b[(m - l) mod M], for all l.
template <typename T>
void correlate(const Spectrum<T>& a, const Spectrum<T>& b, std::size_t rows, std::size_t M, T scale, T* out) {
    const std::size_t F = M / 2 + 1;
    Spectrum<T> acc(F, std::complex<T>(0));
    for (std::size_t r = 0; r < rows; ++r) {
        const auto* pa = a.data() + r * F;
        const auto* pb = b.data() + r * F;
        for (std::size_t f = 0; f < F; ++f) acc[f] += pa[f] * std::conj(pb[f]);
    }
    fft::irfft<T>(acc, std::span<T>(out, M));
    for (std::size_t l = 0; l < M; ++l) out[l] *= scale;
}

template <typename T>
Spectrum<T> kernel_spectrum(const T* kernel, std::size_t M) {
    Spectrum<T> out(M / 2 + 1);
    fft::rfft<T>(std::span<const T>(kernel, M), out);
    return out;
}

// Inverse row spectra back into an image.
template <typename T>
PolarImage<T> from_row_spectra(const Spectrum<T>& s, std::size_t C, std::size_t N, std::size_t M) {
    const std::size_t F = M / 2 + 1;
    PolarImage<T> out(C, N, M);
    for (std::size_t r = 0; r < C * N; ++r)
        fft::irfft<T>(std::span<const std::complex<T>>(s.data() + r * F, F), std::span<T>(out.data.data() + r * M, M));
    return out;
}

}  // namespace

template <typename T>
AttentionScores<T> attention_scores(const PolarImageSet<T>& queries, const PolarImageSet<T>& keys) {
    check_pair(queries, keys, "attention_scores");
    const auto& ref = queries.front();
    const std::size_t K = queries.size(), M = ref.M, rows = ref.C * ref.N;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(ref.C * ref.N * ref.M)));
    const auto qhat = set_spectra(queries);
    const auto khat = set_spectra(keys);
    AttentionScores<T> s(K, M);
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t kp = 0; kp < K; ++kp) correlate(qhat[k], khat[kp], rows, M, scale, &s(k, kp, 0));
    return s;
}

template <typename T>
AttentionCoefficients<T> attention_softmax(const AttentionScores<T>& s) {
    AttentionCoefficients<T> alpha(s.K, s.M);
    const std::size_t row = s.K * s.M;
    for (std::size_t k = 0; k < s.K; ++k) {
        const T* in = s.data.data() + k * row;
        T* out = alpha.data.data() + k * row;
        double peak = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < row; ++i) {
            if (!std::isfinite(static_cast<double>(in[i]))) throw std::invalid_argument("attention_softmax: non-finite score");
            peak = std::max(peak, static_cast<double>(in[i]));
        }
        double total = 0.0;
        std::vector<double> e(row);
        for (std::size_t i = 0; i < row; ++i) total += e[i] = std::exp(static_cast<double>(in[i]) - peak);
        for (std::size_t i = 0; i < row; ++i) out[i] = static_cast<T>(e[i] / total);
    }
    return alpha;
}

template <typename T>
PolarImageSet<T> attention_apply(const AttentionCoefficients<T>& alpha, const PolarImageSet<T>& values) {
    check_set(values, "attention_apply");
    const auto& ref = values.front();
    const std::size_t K = values.size(), M = ref.M, F = M / 2 + 1, rows = ref.C * ref.N;
    if (alpha.K != K || alpha.M != M) throw std::invalid_argument("attention_apply: coefficient shape does not match values");
    const auto vhat = set_spectra(values);
    PolarImageSet<T> out;
    out.reserve(K);
    Spectrum<T> acc(rows * F);
    for (std::size_t k = 0; k < K; ++k) {
        std::fill(acc.begin(), acc.end(), std::complex<T>(0));
        for (std::size_t kp = 0; kp < K; ++kp) {
            const auto ahat = kernel_spectrum(&alpha(k, kp, 0), M);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t f = 0; f < F; ++f) acc[r * F + f] += ahat[f] * vhat[kp][r * F + f];
        }
        out.push_back(from_row_spectra(acc, ref.C, ref.N, M));
    }
    return out;
}

template <typename T>
ApplyGradients<T> attention_apply_backward(const AttentionCoefficients<T>& alpha, const PolarImageSet<T>& values,
                                           const PolarImageSet<T>& upstream) {
    check_pair(values, upstream, "attention_apply_backward");
    const auto& ref = values.front();
    const std::size_t K = values.size(), M = ref.M, F = M / 2 + 1, rows = ref.C * ref.N;
    const auto vhat = set_spectra(values);
    const auto uhat = set_spectra(upstream);
    std::vector<Spectrum<T>> ahat(K * K);
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t kp = 0; kp < K; ++kp) ahat[k * K + kp] = kernel_spectrum(&alpha(k, kp, 0), M);

    ApplyGradients<T> grads{AngularTensor<T>(K, M), {}};
    // d alpha[k, k', l] = sum_{c,n,m} up_k[c,n,m] v_{k'}[c,n,(m - l) mod M]
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t kp = 0; kp < K; ++kp) correlate(uhat[k], vhat[kp], rows, M, T(1), &grads.alpha(k, kp, 0));
    // d v_{k'}[j] = sum_{k, l} alpha[k, k', l] up_k[(j + l) mod M]
    Spectrum<T> acc(rows * F);
    for (std::size_t kp = 0; kp < K; ++kp) {
        std::fill(acc.begin(), acc.end(), std::complex<T>(0));
        for (std::size_t k = 0; k < K; ++k) {
            const auto& a = ahat[k * K + kp];
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t f = 0; f < F; ++f) acc[r * F + f] += std::conj(a[f]) * uhat[k][r * F + f];
        }
        grads.values.push_back(from_row_spectra(acc, ref.C, ref.N, M));
    }
    return grads;
}

template <typename T>
AttentionScores<T> attention_softmax_backward(const AttentionCoefficients<T>& alpha, const AngularTensor<T>& upstream) {
    if (alpha.K != upstream.K || alpha.M != upstream.M) throw std::invalid_argument("attention_softmax_backward: shape mismatch");
    AttentionScores<T> ds(alpha.K, alpha.M);
    const std::size_t row = alpha.K * alpha.M;
    for (std::size_t k = 0; k < alpha.K; ++k) {
        const T* a = alpha.data.data() + k * row;
        const T* u = upstream.data.data() + k * row;
        double dot = 0.0;
        for (std::size_t i = 0; i < row; ++i) dot += static_cast<double>(a[i]) * static_cast<double>(u[i]);
        T* out = ds.data.data() + k * row;
        for (std::size_t i = 0; i < row; ++i)
            out[i] = static_cast<T>(static_cast<double>(a[i]) * (static_cast<double>(u[i]) - dot));
    }
    return ds;
}

template <typename T>
ScoreGradients<T> attention_scores_backward(const PolarImageSet<T>& queries, const PolarImageSet<T>& keys,
                                            const AttentionScores<T>& upstream) {
    check_pair(queries, keys, "attention_scores_backward");
    const auto& ref = queries.front();
    const std::size_t K = queries.size(), M = ref.M, F = M / 2 + 1, rows = ref.C * ref.N;
    if (upstream.K != K || upstream.M != M) throw std::invalid_argument("attention_scores_backward: shape mismatch");
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(ref.C * ref.N * ref.M)));
    const auto qhat = set_spectra(queries);
    const auto khat = set_spectra(keys);
    std::vector<Spectrum<T>> shat(K * K);
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t kp = 0; kp < K; ++kp) shat[k * K + kp] = kernel_spectrum(&upstream(k, kp, 0), M);

    ScoreGradients<T> grads;
    Spectrum<T> acc(rows * F);
    // d q_k[m] = scale sum_{k', l} ds[k, k', l] key_{k'}[(m - l) mod M]
    for (std::size_t k = 0; k < K; ++k) {
        std::fill(acc.begin(), acc.end(), std::complex<T>(0));
        for (std::size_t kp = 0; kp < K; ++kp) {
            const auto& s = shat[k * K + kp];
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t f = 0; f < F; ++f) acc[r * F + f] += s[f] * khat[kp][r * F + f];
        }
        auto g = from_row_spectra(acc, ref.C, ref.N, M);
        for (auto& v : g.data) v *= scale;
        grads.queries.push_back(std::move(g));
    }
    // d key_{k'}[j] = scale sum_{k, l} ds[k, k', l] q_k[(j + l) mod M]
    for (std::size_t kp = 0; kp < K; ++kp) {
        std::fill(acc.begin(), acc.end(), std::complex<T>(0));
        for (std::size_t k = 0; k < K; ++k) {
            const auto& s = shat[k * K + kp];
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t f = 0; f < F; ++f) acc[r * F + f] += std::conj(s[f]) * qhat[k][r * F + f];
        }
        auto g = from_row_spectra(acc, ref.C, ref.N, M);
        for (auto& v : g.data) v *= scale;
        grads.keys.push_back(std::move(g));
    }
    return grads;
}

template <typename T>
std::vector<double> attention_summary(const AttentionCoefficients<T>& alpha) {
    std::vector<double> A(alpha.K * alpha.K, 0.0);
    for (std::size_t k = 0; k < alpha.K; ++k)
        for (std::size_t kp = 0; kp < alpha.K; ++kp)
            for (std::size_t l = 0; l < alpha.M; ++l) A[k * alpha.K + kp] += static_cast<double>(alpha(k, kp, l));
    return A;
}

template <typename T>
AlignmentEstimate alignment_estimate(const AngularTensor<T>& tensor, std::size_t k, std::size_t kp) {
    if (k >= tensor.K || kp >= tensor.K) throw std::invalid_argument("alignment_estimate: image index out of range");
    AlignmentEstimate est;
    est.profile.resize(tensor.M);
    for (std::size_t l = 0; l < tensor.M; ++l) est.profile[l] = static_cast<double>(tensor(k, kp, l));
    const auto it = std::max_element(est.profile.begin(), est.profile.end());
    est.index = static_cast<std::size_t>(it - est.profile.begin());
    est.angle = 2.0 * std::numbers::pi * static_cast<double>(est.index) / static_cast<double>(tensor.M);
    est.degenerate = std::count(est.profile.begin(), est.profile.end(), *it) > 1;
    return est;
}

template <typename T>
PolarImageSet<T> angular_attention_block(const PolarImageSet<T>& z, const AttentionNets<T>& nets, AttentionTape<T>* tape) {
    check_set(z, "angular_attention_block");
    if (!nets.key || !nets.query) throw std::invalid_argument("angular_attention_block: key and query networks required");
    const std::size_t K = z.size();
    PolarImageSet<T> keys(K), queries(K), values(K);
    std::vector<typename ConvStack<T>::Tape> kt(K), qt(K), vt(K);
    for (std::size_t k = 0; k < K; ++k) {
        keys[k] = nets.key->forward(z[k], tape ? &kt[k] : nullptr);
        if (nets.query == nets.key) {
            queries[k] = keys[k];
        } else {
            queries[k] = nets.query->forward(z[k], tape ? &qt[k] : nullptr);
        }
        values[k] = nets.value ? nets.value->forward(z[k], tape ? &vt[k] : nullptr) : z[k];
    }
    auto alpha = attention_softmax(attention_scores(queries, keys));
    auto out = attention_apply(alpha, values);
    if (tape) {
        tape->key_tapes = std::move(kt);
        tape->query_tapes = std::move(qt);
        tape->value_tapes = std::move(vt);
        tape->keys = std::move(keys);
        tape->queries = std::move(queries);
        tape->values = std::move(values);
        tape->alpha = std::move(alpha);
    }
    return out;
}

template <typename T>
PolarImageSet<T> angular_attention_block_backward(const AttentionTape<T>& tape, const AttentionNets<T>& nets,
                                                  const PolarImageSet<T>& upstream, const AttentionNetGrads<T>& grads) {
    const std::size_t K = upstream.size();
    auto ag = attention_apply_backward(tape.alpha, tape.values, upstream);
    auto ds = attention_softmax_backward(tape.alpha, ag.alpha);
    auto sg = attention_scores_backward(tape.queries, tape.keys, ds);
    PolarImageSet<T> dz(K);
    const bool shared = nets.query == nets.key;
    if (shared && grads.query != grads.key)
        throw std::invalid_argument("angular_attention_block_backward: shared key/query nets need a shared gradient");
    for (std::size_t k = 0; k < K; ++k) {
        PolarImage<T> dkq;
        if (shared) {
            auto g = sg.keys[k];
            for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += sg.queries[k].data[i];
            dkq = nets.key->backward(tape.key_tapes[k], g, *grads.key);
        } else {
            dkq = nets.key->backward(tape.key_tapes[k], sg.keys[k], *grads.key);
            auto dq = nets.query->backward(tape.query_tapes[k], sg.queries[k], *grads.query);
            for (std::size_t i = 0; i < dkq.data.size(); ++i) dkq.data[i] += dq.data[i];
        }
        auto dv = nets.value ? nets.value->backward(tape.value_tapes[k], ag.values[k], *grads.value) : ag.values[k];
        for (std::size_t i = 0; i < dkq.data.size(); ++i) dkq.data[i] += dv.data[i];
        dz[k] = std::move(dkq);
    }
    return dz;
}

#define PTDN_INSTANTIATE(T)                                                                                          \
    template AttentionScores<T> attention_scores<T>(const PolarImageSet<T>&, const PolarImageSet<T>&);              \
    template AttentionCoefficients<T> attention_softmax<T>(const AttentionScores<T>&);                              \
    template PolarImageSet<T> attention_apply<T>(const AttentionCoefficients<T>&, const PolarImageSet<T>&);         \
    template ApplyGradients<T> attention_apply_backward<T>(const AttentionCoefficients<T>&, const PolarImageSet<T>&, \
                                                           const PolarImageSet<T>&);                                 \
    template AttentionScores<T> attention_softmax_backward<T>(const AttentionCoefficients<T>&,                       \
                                                              const AngularTensor<T>&);                              \
    template ScoreGradients<T> attention_scores_backward<T>(const PolarImageSet<T>&, const PolarImageSet<T>&,        \
                                                            const AttentionScores<T>&);                              \
    template std::vector<double> attention_summary<T>(const AttentionCoefficients<T>&);                              \
    template AlignmentEstimate alignment_estimate<T>(const AngularTensor<T>&, std::size_t, std::size_t);            \
    template PolarImageSet<T> angular_attention_block<T>(const PolarImageSet<T>&, const AttentionNets<T>&,           \
                                                         AttentionTape<T>*);                                         \
    template PolarImageSet<T> angular_attention_block_backward<T>(const AttentionTape<T>&, const AttentionNets<T>&,  \
                                                                  const PolarImageSet<T>&, const AttentionNetGrads<T>&);

PTDN_INSTANTIATE(float)
PTDN_INSTANTIATE(double)

}  // namespace ptdn
