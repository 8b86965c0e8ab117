#pragma once

#include <cstddef>
#include <vector>

#include "ptdn/conv_stack.hpp"
#include "ptdn/image.hpp"

namespace ptdn {

template <typename T>
using PolarImageSet = std::vector<PolarImage<T>>;

/// K x K x M tensor indexed [k, k', l]; holds raw scores or softmax coefficients.
template <typename T>
struct AngularTensor {
    std::size_t K = 0, M = 0;
    std::vector<T> data;

    AngularTensor() = default;
    AngularTensor(std::size_t k, std::size_t m) : K(k), M(m), data(k * k * m, T(0)) {}

    T& operator()(std::size_t k, std::size_t kp, std::size_t l) { return data[(k * K + kp) * M + l]; }
    const T& operator()(std::size_t k, std::size_t kp, std::size_t l) const { return data[(k * K + kp) * M + l]; }
};

template <typename T>
using AttentionScores = AngularTensor<T>;
template <typename T>
using AttentionCoefficients = AngularTensor<T>;

/// s[k, k', l] = (CNM)^{-1/2} sum_{c,n,m} q_k[c,n,m] key_{k'}[c,n,(m - l) mod M], all l at once by FFT.
template <typename T>
AttentionScores<T> attention_scores(const PolarImageSet<T>& queries, const PolarImageSet<T>& keys);

/// Softmax over (k', l) for each k; max-subtracted, accumulated in double.
template <typename T>
AttentionCoefficients<T> attention_softmax(const AttentionScores<T>& s);

/// out_k = sum_{l, k'} alpha[k, k', l] S_l(value_{k'}), by FFT along the angular axis.
template <typename T>
PolarImageSet<T> attention_apply(const AttentionCoefficients<T>& alpha, const PolarImageSet<T>& values);

template <typename T>
struct ApplyGradients {
    AngularTensor<T> alpha;
    PolarImageSet<T> values;
};
template <typename T>
ApplyGradients<T> attention_apply_backward(const AttentionCoefficients<T>& alpha, const PolarImageSet<T>& values,
                                           const PolarImageSet<T>& upstream);

template <typename T>
AttentionScores<T> attention_softmax_backward(const AttentionCoefficients<T>& alpha, const AngularTensor<T>& upstream);

template <typename T>
struct ScoreGradients {
    PolarImageSet<T> queries;
    PolarImageSet<T> keys;
};
template <typename T>
ScoreGradients<T> attention_scores_backward(const PolarImageSet<T>& queries, const PolarImageSet<T>& keys,
                                            const AttentionScores<T>& upstream);

/// A[k, k'] = sum_l alpha[k, k', l], row-major K x K.
template <typename T>
std::vector<double> attention_summary(const AttentionCoefficients<T>& alpha);

struct AlignmentEstimate {
    double angle = 0.0;          // 2 pi l* / M
    std::size_t index = 0;       // l*
    bool degenerate = false;     // maximum attained at more than one l
    std::vector<double> profile; // tensor[k, k', .]
};

/// Angle of the largest entry of tensor[k, k', .]; works on scores or coefficients.
template <typename T>
AlignmentEstimate alignment_estimate(const AngularTensor<T>& tensor, std::size_t k, std::size_t kp);

/// Angular attention with polar CNN key/query/value networks. key and query may alias
/// (shared weights); a null value network means the identity.
template <typename T>
struct AttentionNets {
    const ConvStack<T>* key = nullptr;
    const ConvStack<T>* query = nullptr;
    const ConvStack<T>* value = nullptr;
};

template <typename T>
struct AttentionTape {
    std::vector<typename ConvStack<T>::Tape> key_tapes, query_tapes, value_tapes;
    PolarImageSet<T> keys, queries, values;
    AttentionCoefficients<T> alpha;
};

template <typename T>
PolarImageSet<T> angular_attention_block(const PolarImageSet<T>& z, const AttentionNets<T>& nets,
                                         AttentionTape<T>* tape = nullptr);

/// Gradient accumulators mirror the nets; key_grad and query_grad may alias.
template <typename T>
struct AttentionNetGrads {
    ConvStack<T>* key = nullptr;
    ConvStack<T>* query = nullptr;
    ConvStack<T>* value = nullptr;
};

template <typename T>
PolarImageSet<T> angular_attention_block_backward(const AttentionTape<T>& tape, const AttentionNets<T>& nets,
                                                  const PolarImageSet<T>& upstream, const AttentionNetGrads<T>& grads);

}  // namespace ptdn
