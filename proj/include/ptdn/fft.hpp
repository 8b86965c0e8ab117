#pragma once

#include <complex>
#include <cstddef>
#include <span>

// Thin FFTW wrappers. Plans are cached per thread; plan creation is serialized.
namespace ptdn::fft {

/// Real-to-complex DFT of length in.size(); out must hold in.size() / 2 + 1 bins.
template <typename T>
void rfft(std::span<const T> in, std::span<std::complex<T>> out);

/// Inverse of rfft, normalized by 1 / out.size().
template <typename T>
void irfft(std::span<const std::complex<T>> in, std::span<T> out);

/// In-place 2D complex DFT of an n x n row-major array. The inverse is normalized by 1 / n^2.
void fft2(std::span<std::complex<double>> data, std::size_t n, bool inverse);

}  // namespace ptdn::fft
