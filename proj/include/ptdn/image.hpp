#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ptdn {

/// L x L raster on [-1, 1)^2. Storage index (a, b) holds pixel (i, j) = (a - L/2, b - L/2),
/// located at (2i/L, 2j/L).
template <typename T>
struct CartesianImage {
    std::size_t L = 0;
    std::vector<T> data;

    CartesianImage() = default;
    explicit CartesianImage(std::size_t side) : L(side), data(side * side, T(0)) {}

    T& operator()(std::size_t a, std::size_t b) { return data[a * L + b]; }
    const T& operator()(std::size_t a, std::size_t b) const { return data[a * L + b]; }

    /// Pixel coordinate along either axis for storage index a.
    [[nodiscard]] double coord(std::size_t a) const {
        return 2.0 * (static_cast<double>(a) - static_cast<double>(L / 2)) / static_cast<double>(L);
    }
};

/// C x N x M tensor: channels x radii x angles, angles fastest.
template <typename T>
struct PolarImage {
    std::size_t C = 0, N = 0, M = 0;
    std::vector<T> data;

    PolarImage() = default;
    PolarImage(std::size_t c, std::size_t n, std::size_t m) : C(c), N(n), M(m), data(c * n * m, T(0)) {}

    T& operator()(std::size_t c, std::size_t n, std::size_t m) { return data[(c * N + n) * M + m]; }
    const T& operator()(std::size_t c, std::size_t n, std::size_t m) const { return data[(c * N + n) * M + m]; }

    std::span<T> row(std::size_t c, std::size_t n) { return {data.data() + (c * N + n) * M, M}; }
    std::span<const T> row(std::size_t c, std::size_t n) const { return {data.data() + (c * N + n) * M, M}; }

    [[nodiscard]] bool same_shape(const PolarImage& o) const { return C == o.C && N == o.N && M == o.M; }
};

template <typename U, typename T>
CartesianImage<U> cast_image(const CartesianImage<T>& x) {
    CartesianImage<U> out(x.L);
    for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = static_cast<U>(x.data[i]);
    return out;
}

template <typename U, typename T>
PolarImage<U> cast_image(const PolarImage<T>& z) {
    PolarImage<U> out(z.C, z.N, z.M);
    for (std::size_t i = 0; i < z.data.size(); ++i) out.data[i] = static_cast<U>(z.data[i]);
    return out;
}

template <typename T>
std::string shape_string(const PolarImage<T>& z) {
    return std::to_string(z.C) + "x" + std::to_string(z.N) + "x" + std::to_string(z.M);
}

}  // namespace ptdn
