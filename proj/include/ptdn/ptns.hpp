#pragma once

// PTNS: a minimal binary tensor container.
//
//   offset  size        field
//   0       4           magic "PTNS"
//   4       1           version (= 1)
//   5       1           dtype (1 = float32, 2 = float64)
//   6       1           rank
//   7       1           reserved (= 0)
//   8       8 * rank    dims, uint64 little-endian
//   ...     elem * prod payload, row-major little-endian
//
// Several tensors may be concatenated in one stream.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "ptdn/image.hpp"

namespace ptdn {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

/// A tensor as stored on disk. Values are kept in double regardless of the
/// stored dtype; f32 tensors round-trip exactly because every float is a double.
struct TensorFile {
    DType dtype = DType::f32;
    std::vector<std::uint64_t> dims;
    std::vector<double> values;

    [[nodiscard]] std::uint64_t element_count() const;
};

class PtnsError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void write_ptns(std::ostream& out, const TensorFile& t);
/// Reads one tensor; throws PtnsError on bad magic/version/dtype or truncation.
TensorFile read_ptns(std::istream& in);

void save_ptns(const std::filesystem::path& path, const TensorFile& t);
TensorFile load_ptns(const std::filesystem::path& path);

/// A rank-2 (L x L) or rank-3 (K x L x L) tensor as a list of square images.
template <typename T>
std::vector<CartesianImage<T>> images_from_tensor(const TensorFile& t);
/// Stacks equally sized images into a K x L x L tensor (or L x L when rank2 and K = 1).
template <typename T>
TensorFile tensor_from_images(const std::vector<CartesianImage<T>>& images, DType dtype, bool rank2 = false);

/// 8-bit binary PGM with per-image min/max scaling.
template <typename T>
void write_pgm(const std::filesystem::path& path, const CartesianImage<T>& x);

}  // namespace ptdn
