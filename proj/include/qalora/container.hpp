#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "qalora/training.hpp"

namespace qalora {

// Binary model container ("QALM"):
//
//   bytes 0..3   magic "QALM"
//   bytes 4..7   format version, unsigned 32-bit little-endian (currently 1)
//   bytes 8..11  header length in bytes, unsigned 32-bit little-endian
//   ...          UTF-8 JSON header
//   ...          zero padding up to the payload base (next 8-byte boundary)
//   ...          tensor blobs
//
// The header lists every tensor (name, kind in {fp, quant, adapterA,
// adapterB}, shape, bits, group_size, offset, length) and the model metadata
// (layer order, activations, adapter scales, loss kind). Tensor offsets are
// relative to the payload base so the header length does not feed back into
// the offsets it contains; each blob starts on an 8-byte boundary of the
// file. FP and adapter tensors are row-major little-endian 64-bit reals.
// A quant tensor blob is the packed column-major codes followed by the
// scales and then the zeros, both row-major little-endian 32-bit reals of
// shape num_groups x d_out, with no padding in between.
namespace container {

inline constexpr std::uint32_t kFormatVersion = 1;

// Closed-form blob sizes, also used by the storage-accounting tests.
inline std::size_t fp_tensor_bytes(std::size_t rows, std::size_t cols) {
    return 8 * rows * cols;
}
inline std::size_t quant_tensor_bytes(std::size_t d_in, std::size_t d_out, int bits,
                                      std::size_t group_size) {
    const std::size_t bytes_per_column = (d_in * static_cast<std::size_t>(bits) + 7) / 8;
    const std::size_t num_groups = d_in / group_size;
    return bytes_per_column * d_out + 2 * 4 * num_groups * d_out;
}
inline std::size_t align8(std::size_t n) {
    return (n + 7) & ~std::size_t{7};
}

std::vector<std::uint8_t> serialize(const ToyModel& model);
ToyModel parse(std::span<const std::uint8_t> bytes);

void save(const ToyModel& model, const std::filesystem::path& path);
ToyModel load(const std::filesystem::path& path);

} // namespace container
} // namespace qalora
