#include "qalora/quant.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

namespace qalora {

namespace {

void check_bits(int bits) {
    if (!valid_bits(bits)) {
        throw Error("bit width must be one of {2,3,4,8}, got " + std::to_string(bits));
    }
}

std::size_t packed_size(std::size_t count, int bits) {
    return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

} // namespace

std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, int bits) {
    check_bits(bits);
    const std::uint32_t limit = 1u << bits;
    std::vector<std::uint8_t> out(packed_size(codes.size(), bits), 0);
    std::size_t bitpos = 0;
    for (std::size_t i = 0; i < codes.size(); ++i) {
        if (codes[i] >= limit) {
            throw Error("pack_codes: code " + std::to_string(codes[i]) +
                        " at index " + std::to_string(i) + " out of range for " +
                        std::to_string(bits) + " bits");
        }
        const std::uint32_t v = codes[i];
        for (int b = 0; b < bits; ++b, ++bitpos) {
            if ((v >> b) & 1u) {
                out[bitpos >> 3] |= static_cast<std::uint8_t>(1u << (bitpos & 7));
            }
        }
    }
    return out;
}

CodeArray unpack_codes(std::span<const std::uint8_t> bytes, int bits, std::size_t count) {
    check_bits(bits);
    if (bytes.size() < packed_size(count, bits)) {
        throw Error("unpack_codes: need " + std::to_string(packed_size(count, bits)) +
                    " bytes for " + std::to_string(count) + " codes, got " +
                    std::to_string(bytes.size()));
    }
    CodeArray out(count);
    const std::uint32_t mask = (1u << bits) - 1u;
    std::uint32_t acc = 0;
    int acc_bits = 0;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < count; ++i) {
        while (acc_bits < bits) {
            acc |= static_cast<std::uint32_t>(bytes[pos++]) << acc_bits;
            acc_bits += 8;
        }
        out[i] = static_cast<std::uint8_t>(acc & mask);
        acc >>= bits;
        acc_bits -= bits;
    }
    return out;
}

MinMaxResult quantize_minmax(const Vector& v, int bits) {
    check_bits(bits);
    if (v.empty()) {
        throw Error("quantize_minmax: empty input");
    }
    const auto [lo_it, hi_it] = std::minmax_element(v.begin(), v.end());
    const double lo = *lo_it, hi = *hi_it;
    const double levels = static_cast<double>((1 << bits) - 1);

    MinMaxResult res;
    res.codes.resize(v.size());
    if (lo == hi) {
        // Constant group: the nominal scale would be zero. Store codes 0 with
        // unit scale so dequant returns the value exactly.
        res.scale = 1.0;
        res.zero = -lo;
        std::fill(res.codes.begin(), res.codes.end(), std::uint8_t{0});
        return res;
    }
    const double scale = (hi - lo) / levels;
    res.scale = scale;
    res.zero = -lo / scale;
    const double max_code = levels;
    for (std::size_t i = 0; i < v.size(); ++i) {
        double c = std::round((v[i] - lo) / scale); // halves away from zero
        c = std::clamp(c, 0.0, max_code);           // guards float overshoot
        res.codes[i] = static_cast<std::uint8_t>(c);
    }
    return res;
}

QuantizedMatrix::QuantizedMatrix(std::size_t d_in, std::size_t d_out, int bits,
                                 std::size_t group_size, std::vector<std::uint8_t> packed,
                                 Matrix scales, Matrix zeros)
    : d_in_(d_in),
      d_out_(d_out),
      bits_(bits),
      group_size_(group_size),
      num_groups_(0),
      bytes_per_column_(packed_size(d_in, bits)),
      packed_(std::move(packed)),
      scales_(std::move(scales)),
      zeros_(std::move(zeros)) {
    check_bits(bits_);
    if (d_in_ == 0 || d_out_ == 0) {
        throw Error("QuantizedMatrix: dimensions must be positive");
    }
    if (group_size_ == 0 || d_in_ % group_size_ != 0) {
        throw Error("QuantizedMatrix: group size " + std::to_string(group_size_) +
                    " does not divide d_in " + std::to_string(d_in_));
    }
    num_groups_ = d_in_ / group_size_;
    if (scales_.rows() != num_groups_ || scales_.cols() != d_out_ ||
        zeros_.rows() != num_groups_ || zeros_.cols() != d_out_) {
        throw Error("QuantizedMatrix: scale/zero shape must be num_groups x d_out");
    }
    for (double a : scales_.data()) {
        if (!(a > 0.0)) {
            throw Error("QuantizedMatrix: scales must be > 0");
        }
    }
    if (packed_.size() != bytes_per_column_ * d_out_) {
        throw Error("QuantizedMatrix: packed size " + std::to_string(packed_.size()) +
                    " does not match layout (" +
                    std::to_string(bytes_per_column_ * d_out_) + " bytes)");
    }
    // Padding bits above each column's last code must be zero so that byte
    // comparisons of equal matrices are meaningful.
    const std::size_t used_bits = d_in_ * static_cast<std::size_t>(bits_);
    if (used_bits % 8 != 0) {
        const std::size_t last = bytes_per_column_ - 1;
        const std::uint8_t pad_mask =
            static_cast<std::uint8_t>(0xFFu << (used_bits % 8));
        for (std::size_t j = 0; j < d_out_; ++j) {
            if (packed_[j * bytes_per_column_ + last] & pad_mask) {
                throw Error("QuantizedMatrix: nonzero padding bits in column " +
                            std::to_string(j));
            }
        }
    }
}

std::uint8_t QuantizedMatrix::code(std::size_t i, std::size_t j) const {
    const std::size_t bit = i * static_cast<std::size_t>(bits_);
    const std::uint8_t* col = packed_.data() + j * bytes_per_column_;
    std::uint32_t acc = col[bit >> 3];
    if ((bit & 7) + static_cast<std::size_t>(bits_) > 8) {
        acc |= static_cast<std::uint32_t>(col[(bit >> 3) + 1]) << 8;
    }
    return static_cast<std::uint8_t>((acc >> (bit & 7)) & ((1u << bits_) - 1u));
}

void QuantizedMatrix::unpack_column(std::size_t j, std::uint8_t* out) const {
    const std::uint8_t* col = packed_.data() + j * bytes_per_column_;
    const std::uint32_t mask = (1u << bits_) - 1u;
    std::uint32_t acc = 0;
    int acc_bits = 0;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < d_in_; ++i) {
        while (acc_bits < bits_) {
            acc |= static_cast<std::uint32_t>(col[pos++]) << acc_bits;
            acc_bits += 8;
        }
        out[i] = static_cast<std::uint8_t>(acc & mask);
        acc >>= bits_;
        acc_bits -= bits_;
    }
}

QuantizedMatrix QuantizedMatrix::with_zeros(Matrix new_zeros) const {
    return QuantizedMatrix(d_in_, d_out_, bits_, group_size_, packed_, scales_,
                           std::move(new_zeros));
}

QuantizedMatrix quantize_groupwise(const Matrix& w, int bits, std::size_t group_size) {
    check_bits(bits);
    const std::size_t d_in = w.rows(), d_out = w.cols();
    if (d_in == 0 || d_out == 0) {
        throw Error("quantize_groupwise: empty matrix");
    }
    if (group_size == 0 || d_in % group_size != 0) {
        throw Error("quantize_groupwise: group size " + std::to_string(group_size) +
                    " does not divide d_in " + std::to_string(d_in));
    }
    const std::size_t num_groups = d_in / group_size;
    std::vector<double> scales(num_groups * d_out);
    std::vector<double> zeros(num_groups * d_out);
    std::vector<std::uint8_t> packed;
    packed.reserve(((d_in * bits + 7) / 8) * d_out);

    std::vector<double> slice(group_size);
    CodeArray column(d_in);
    for (std::size_t j = 0; j < d_out; ++j) {
        for (std::size_t l = 0; l < num_groups; ++l) {
            for (std::size_t r = 0; r < group_size; ++r) {
                slice[r] = w(l * group_size + r, j);
            }
            MinMaxResult mm = quantize_minmax(Vector(slice), bits);
            scales[l * d_out + j] = mm.scale;
            zeros[l * d_out + j] = mm.zero;
            std::copy(mm.codes.begin(), mm.codes.end(),
                      column.begin() + static_cast<std::ptrdiff_t>(l * group_size));
        }
        const auto col_bytes = pack_codes(column, bits);
        packed.insert(packed.end(), col_bytes.begin(), col_bytes.end());
    }
    return QuantizedMatrix(d_in, d_out, bits, group_size, std::move(packed),
                           Matrix(num_groups, d_out, std::move(scales)),
                           Matrix(num_groups, d_out, std::move(zeros)));
}

Matrix dequantize(const QuantizedMatrix& q) {
    const std::size_t d_in = q.d_in(), d_out = q.d_out(), g = q.group_size();
    std::vector<double> out(d_in * d_out);
    CodeArray column(d_in);
    for (std::size_t j = 0; j < d_out; ++j) {
        q.unpack_column(j, column.data());
        for (std::size_t i = 0; i < d_in; ++i) {
            const std::size_t l = i / g;
            out[i * d_out + j] =
                q.scales()(l, j) * (static_cast<double>(column[i]) - q.zeros()(l, j));
        }
    }
    return Matrix(d_in, d_out, std::move(out));
}

QuantizedMatrix rtn_requantize(const Matrix& w, int bits, std::size_t group_size) {
    return quantize_groupwise(w, bits, group_size);
}

} // namespace qalora
