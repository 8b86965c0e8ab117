#include "ptdn/ptns.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace ptdn {
namespace {

constexpr std::array<char, 4> kMagic = {'P', 'T', 'N', 'S'};
constexpr std::uint8_t kVersion = 1;

template <typename U>
U to_little(U v) {
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(U)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<U>(bytes);
    }
    return v;
}

template <typename U>
void put(std::ostream& out, U v) {
    v = to_little(v);
    out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::istream& in, const char* what) {
    U v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(U))) throw PtnsError(std::string("PTNS: truncated ") + what);
    return to_little(v);
}

}  // namespace

std::uint64_t TensorFile::element_count() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

void write_ptns(std::ostream& out, const TensorFile& t) {
    if (t.dims.size() > 255) throw PtnsError("PTNS: rank exceeds 255");
    if (t.values.size() != t.element_count()) throw PtnsError("PTNS: value count does not match dims");
    out.write(kMagic.data(), kMagic.size());
    put<std::uint8_t>(out, kVersion);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dims.size()));
    put<std::uint8_t>(out, 0);
    for (auto d : t.dims) put<std::uint64_t>(out, d);
    if (t.dtype == DType::f32) {
        for (double v : t.values) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    } else {
        for (double v : t.values) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
    if (!out) throw PtnsError("PTNS: write failed");
}

TensorFile read_ptns(std::istream& in) {
    std::array<char, 4> magic{};
    if (!in.read(magic.data(), magic.size())) throw PtnsError("PTNS: truncated header");
    if (magic != kMagic) throw PtnsError("PTNS: bad magic");
    const auto version = get<std::uint8_t>(in, "header");
    if (version != kVersion) throw PtnsError("PTNS: unsupported version " + std::to_string(version));
    const auto dtype = get<std::uint8_t>(in, "header");
    if (dtype != 1 && dtype != 2) throw PtnsError("PTNS: unknown dtype " + std::to_string(dtype));
    const auto rank = get<std::uint8_t>(in, "header");
    get<std::uint8_t>(in, "header");

    TensorFile t;
    t.dtype = static_cast<DType>(dtype);
    t.dims.resize(rank);
    for (auto& d : t.dims) d = get<std::uint64_t>(in, "dims");
    const std::uint64_t count = t.element_count();
    t.values.resize(count);
    if (t.dtype == DType::f32) {
        std::vector<std::uint32_t> raw(count);
        if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count * 4)))
            throw PtnsError("PTNS: truncated payload");
        for (std::uint64_t i = 0; i < count; ++i) t.values[i] = std::bit_cast<float>(to_little(raw[i]));
    } else {
        std::vector<std::uint64_t> raw(count);
        if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count * 8)))
            throw PtnsError("PTNS: truncated payload");
        for (std::uint64_t i = 0; i < count; ++i) t.values[i] = std::bit_cast<double>(to_little(raw[i]));
    }
    return t;
}

void save_ptns(const std::filesystem::path& path, const TensorFile& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw PtnsError("PTNS: cannot open " + path.string() + " for writing");
    write_ptns(out, t);
}

TensorFile load_ptns(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PtnsError("PTNS: cannot open " + path.string());
    return read_ptns(in);
}

template <typename T>
std::vector<CartesianImage<T>> images_from_tensor(const TensorFile& t) {
    std::uint64_t K = 1, L = 0;
    if (t.dims.size() == 2 && t.dims[0] == t.dims[1]) {
        L = t.dims[0];
    } else if (t.dims.size() == 3 && t.dims[1] == t.dims[2]) {
        K = t.dims[0];
        L = t.dims[1];
    } else {
        std::string shape;
        for (auto d : t.dims) shape += (shape.empty() ? "" : "x") + std::to_string(d);
        throw std::invalid_argument("expected an L x L image or a K x L x L stack, got a tensor of shape [" + shape + "]");
    }
    if (K == 0 || L == 0) throw std::invalid_argument("empty image tensor");
    std::vector<CartesianImage<T>> out;
    for (std::uint64_t k = 0; k < K; ++k) {
        CartesianImage<T> x(L);
        for (std::uint64_t i = 0; i < L * L; ++i) x.data[i] = static_cast<T>(t.values[k * L * L + i]);
        out.push_back(std::move(x));
    }
    return out;
}

template <typename T>
TensorFile tensor_from_images(const std::vector<CartesianImage<T>>& images, DType dtype, bool rank2) {
    if (images.empty()) throw std::invalid_argument("tensor_from_images: no images");
    const std::uint64_t L = images.front().L;
    TensorFile t;
    t.dtype = dtype;
    if (rank2 && images.size() == 1)
        t.dims = {L, L};
    else
        t.dims = {images.size(), L, L};
    for (const auto& x : images) {
        if (x.L != L) throw std::invalid_argument("tensor_from_images: images differ in size");
        for (T v : x.data) t.values.push_back(dtype == DType::f32 ? static_cast<double>(static_cast<float>(v)) : static_cast<double>(v));
    }
    return t;
}

template <typename T>
void write_pgm(const std::filesystem::path& path, const CartesianImage<T>& x) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << "P5\n" << x.L << " " << x.L << "\n255\n";
    double lo = 0.0, hi = 0.0;
    if (!x.data.empty()) {
        const auto [mn, mx] = std::minmax_element(x.data.begin(), x.data.end());
        lo = static_cast<double>(*mn);
        hi = static_cast<double>(*mx);
    }
    const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
    // rows top to bottom = decreasing y; columns = increasing x
    for (std::size_t b = x.L; b-- > 0;)
        for (std::size_t a = 0; a < x.L; ++a) {
            const double v = std::round((static_cast<double>(x(a, b)) - lo) * scale);
            out.put(static_cast<char>(static_cast<unsigned char>(std::clamp(v, 0.0, 255.0))));
        }
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

#define PTDN_INSTANTIATE(T)                                                                            \
    template std::vector<CartesianImage<T>> images_from_tensor<T>(const TensorFile&);                  \
    template TensorFile tensor_from_images<T>(const std::vector<CartesianImage<T>>&, DType, bool);     \
    template void write_pgm<T>(const std::filesystem::path&, const CartesianImage<T>&);

PTDN_INSTANTIATE(float)
PTDN_INSTANTIATE(double)

}  // namespace ptdn
