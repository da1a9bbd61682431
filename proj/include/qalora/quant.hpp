#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "qalora/numkit.hpp"

namespace qalora {

inline constexpr bool valid_bits(int bits) {
    return bits == 2 || bits == 3 || bits == 4 || bits == 8;
}

using CodeArray = std::vector<std::uint8_t>;

// Packs N-bit codes into a continuous bitstream, LSB-first within each byte
// (a value's least-significant bit is written first). The final partial byte
// is zero-padded in its high bits. Throws if any code >= 2^bits.
std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, int bits);

// Exact inverse of pack_codes on the first `count` values. Throws if the
// buffer holds fewer than ceil(count*bits/8) bytes.
CodeArray unpack_codes(std::span<const std::uint8_t> bytes, int bits, std::size_t count);

struct MinMaxResult {
    CodeArray codes;
    double scale; // weight units per code step, always > 0
    double zero;  // code-step units; dequant = scale * (code - zero)
};

// Asymmetric min-max quantization of one value group:
//   scale = (max - min) / (2^bits - 1), zero = -min / scale,
//   code  = round((v - min) / scale) clamped to [0, 2^bits - 1],
// with halves rounded away from zero. A constant group (max == min) gets
// scale 1, all-zero codes, and zero = -value, which round-trips exactly and
// keeps the scale positive.
MinMaxResult quantize_minmax(const Vector& v, int bits);

// Group-wise quantized weight matrix. Each column is split into num_groups
// contiguous slices of group_size rows; slice l of column j carries one
// (scale, zero) pair and the de-quantized entry is
//   scale[l][j] * (code(i, j) - zero[l][j]),  l = i / group_size.
// Codes are stored packed column-major: column j's d_in codes form one
// LSB-first bitstream padded to a byte boundary, so per-column access stays
// contiguous. Zeros are real-valued; merged adapters land there.
class QuantizedMatrix {
public:
    QuantizedMatrix(std::size_t d_in, std::size_t d_out, int bits, std::size_t group_size,
                    std::vector<std::uint8_t> packed, Matrix scales, Matrix zeros);

    std::size_t d_in() const { return d_in_; }
    std::size_t d_out() const { return d_out_; }
    int bits() const { return bits_; }
    std::size_t group_size() const { return group_size_; }
    std::size_t num_groups() const { return num_groups_; }
    std::size_t bytes_per_column() const { return bytes_per_column_; }
    std::span<const std::uint8_t> packed() const { return packed_; }
    const Matrix& scales() const { return scales_; } // num_groups x d_out
    const Matrix& zeros() const { return zeros_; }   // num_groups x d_out

    std::uint8_t code(std::size_t i, std::size_t j) const;
    // Decodes column j into out[0..d_in).
    void unpack_column(std::size_t j, std::uint8_t* out) const;

    // Same codes/scales/bits/group size with replaced zeros.
    QuantizedMatrix with_zeros(Matrix new_zeros) const;

private:
    std::size_t d_in_;
    std::size_t d_out_;
    int bits_;
    std::size_t group_size_;
    std::size_t num_groups_;
    std::size_t bytes_per_column_;
    std::vector<std::uint8_t> packed_;
    Matrix scales_;
    Matrix zeros_;
};

// quantize_minmax applied independently to each length-group_size slice of
// each column. group_size == d_in reproduces column-wise quantization.
QuantizedMatrix quantize_groupwise(const Matrix& w, int bits, std::size_t group_size);

Matrix dequantize(const QuantizedMatrix& q);

// Round-to-nearest PTQ over an already-trained FP matrix. Identical to
// quantize_groupwise; the separate name keeps merge-then-quantize baselines
// explicit at call sites.
QuantizedMatrix rtn_requantize(const Matrix& w, int bits, std::size_t group_size);

} // namespace qalora
