#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "qalora/quant.hpp"
#include "qalora/rng.hpp"

using namespace qalora;

namespace {

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
    std::vector<double> data(r * c);
    for (double& v : data) {
        v = scale * rng.normal();
    }
    return Matrix(r, c, std::move(data));
}

// Direct evaluation of the min-max rule, kept separate from the
// implementation: scale = (max-min)/(2^N-1), code = round((v-min)/scale).
struct MinMaxOracle {
    double scale;
    double zero;
    std::vector<int> codes;
};

MinMaxOracle minmax_oracle(const std::vector<double>& v, int bits) {
    double lo = v[0], hi = v[0];
    for (double x : v) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    MinMaxOracle o;
    o.scale = (hi - lo) / static_cast<double>((1 << bits) - 1);
    o.zero = -lo / o.scale;
    for (double x : v) {
        o.codes.push_back(static_cast<int>(std::round((x - lo) / o.scale)));
    }
    return o;
}

double roundtrip_max_err_vs_halfscale(const Matrix& w, const QuantizedMatrix& q) {
    const Matrix back = dequantize(q);
    double worst_margin = -1e300;
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) {
            const double err = std::abs(w(i, j) - back(i, j));
            const double bound = q.scales()(i / q.group_size(), j) / 2.0 + 1e-12;
            worst_margin = std::max(worst_margin, err - bound);
        }
    }
    return worst_margin; // <= 0 when every entry respects the bound
}

bool bitwise_equal(const QuantizedMatrix& a, const QuantizedMatrix& b) {
    if (a.packed().size() != b.packed().size()) {
        return false;
    }
    if (std::memcmp(a.packed().data(), b.packed().data(), a.packed().size()) != 0) {
        return false;
    }
    for (std::size_t i = 0; i < a.scales().data().size(); ++i) {
        if (a.scales().data()[i] != b.scales().data()[i]) {
            return false;
        }
        if (a.zeros().data()[i] != b.zeros().data()[i]) {
            return false;
        }
    }
    return a.bits() == b.bits() && a.group_size() == b.group_size();
}

} // namespace

TEST_CASE("quantize_minmax worked examples") {
    SUBCASE("0..3 at 2 bits is exact") {
        const MinMaxResult r = quantize_minmax(Vector{0, 1, 2, 3}, 2);
        CHECK(r.scale == 1.0);
        CHECK(r.zero == 0.0);
        const CodeArray want{0, 1, 2, 3};
        CHECK(r.codes == want);
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(r.scale * (r.codes[i] - r.zero) == static_cast<double>(i));
        }
    }
    SUBCASE("[-1, 0, 2] at 4 bits matches the direct min-max oracle") {
        const std::vector<double> v{-1.0, 0.0, 2.0};
        const MinMaxOracle o = minmax_oracle(v, 4);
        CHECK(o.scale == doctest::Approx(0.2).epsilon(1e-15));
        CHECK(o.zero == doctest::Approx(5.0).epsilon(1e-12));

        const MinMaxResult r = quantize_minmax(Vector(v), 4);
        CHECK(r.scale == o.scale);
        CHECK(r.zero == o.zero);
        REQUIRE(r.codes.size() == 3);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(static_cast<int>(r.codes[i]) == o.codes[i]);
        }
        const CodeArray want{0, 5, 15};
        CHECK(r.codes == want);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(r.scale * (r.codes[i] - r.zero) == doctest::Approx(v[i]).epsilon(1e-15));
        }
    }
    SUBCASE("constant group") {
        const MinMaxResult r = quantize_minmax(Vector{2.5, 2.5, 2.5}, 3);
        CHECK(r.scale == 1.0);
        CHECK(r.zero == -2.5);
        const CodeArray want{0, 0, 0};
        CHECK(r.codes == want);
        CHECK(r.scale * (r.codes[0] - r.zero) == 2.5);
    }
    SUBCASE("preconditions") {
        CHECK_THROWS_AS(quantize_minmax(Vector{}, 4), Error);
        CHECK_THROWS_AS(quantize_minmax(Vector{1.0}, 5), Error);
    }
}

TEST_CASE("quantize_groupwise worked examples") {
    SUBCASE("single group of four") {
        const Matrix w(4, 1, {0, 1, 2, 3});
        const QuantizedMatrix q = quantize_groupwise(w, 2, 4);
        CHECK(q.num_groups() == 1);
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(q.code(i, 0) == i);
        }
        const Matrix back = dequantize(q);
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(back(i, 0) == w(i, 0));
        }
    }
    SUBCASE("two groups with very different ranges") {
        const Matrix w(4, 1, {0, 1, 100, 103});
        const QuantizedMatrix q = quantize_groupwise(w, 2, 2);
        CHECK(q.scales()(0, 0) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
        CHECK(q.zeros()(0, 0) == 0.0);
        CHECK(q.scales()(1, 0) == doctest::Approx(1.0).epsilon(1e-15));
        CHECK(q.zeros()(1, 0) == doctest::Approx(-100.0).epsilon(1e-15));
        CHECK(roundtrip_max_err_vs_halfscale(w, q) <= 0.0);
    }
    SUBCASE("random 64x8 at group size 32 respects the half-scale bound") {
        Rng rng(21);
        const Matrix w = random_matrix(rng, 64, 8);
        const QuantizedMatrix q = quantize_groupwise(w, 2, 32);
        CHECK(roundtrip_max_err_vs_halfscale(w, q) <= 0.0);
    }
    SUBCASE("group size must divide d_in") {
        CHECK_THROWS_AS(quantize_groupwise(Matrix(6, 2), 4, 4), Error);
    }
}

TEST_CASE("dequantize special cases") {
    SUBCASE("all-zero codes and zeros give the zero matrix") {
        const std::size_t d_in = 8, d_out = 3;
        std::vector<std::uint8_t> packed(4 * d_out, 0); // 8 codes * 4 bits = 4 bytes/col
        std::vector<double> scales(2 * d_out, 0.5);
        const QuantizedMatrix q(d_in, d_out, 4, 4, std::move(packed),
                                Matrix(2, d_out, std::move(scales)), Matrix(2, d_out));
        const Matrix back = dequantize(q);
        for (double v : back.data()) {
            CHECK(v == 0.0);
        }
    }
    SUBCASE("quantize-dequantize-quantize is idempotent bitwise") {
        Rng rng(22);
        for (int bits : {2, 3, 4, 8}) {
            const Matrix w = random_matrix(rng, 32, 5);
            const QuantizedMatrix q1 = quantize_groupwise(w, bits, 8);
            const QuantizedMatrix q2 = quantize_groupwise(dequantize(q1), bits, 8);
            CHECK(bitwise_equal(q1, q2));
        }
    }
}

TEST_CASE("pack/unpack worked bytes") {
    SUBCASE("two nibbles") {
        const CodeArray codes{5, 10};
        const auto bytes = pack_codes(codes, 4);
        REQUIRE(bytes.size() == 1);
        CHECK(bytes[0] == 0xA5);
        CHECK(unpack_codes(bytes, 4, 2) == codes);
    }
    SUBCASE("three 3-bit values straddle a byte") {
        const CodeArray codes{7, 0, 5};
        const auto bytes = pack_codes(codes, 3);
        REQUIRE(bytes.size() == 2);
        CHECK(bytes[0] == 0x47);
        CHECK(bytes[1] == 0x01);
        CHECK(unpack_codes(bytes, 3, 3) == codes);
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(pack_codes(CodeArray{4}, 2), Error);
        CHECK_THROWS_AS(unpack_codes(std::vector<std::uint8_t>{0xFF}, 4, 3), Error);
    }
}

TEST_CASE("packing is a bijection for every bit width") {
    for (int bits : {2, 3, 4, 8}) {
        const std::size_t n_values = std::size_t{1} << bits;
        // exhaustive single-value round trip
        for (std::size_t v = 0; v < n_values; ++v) {
            const CodeArray one{static_cast<std::uint8_t>(v)};
            CHECK(unpack_codes(pack_codes(one, bits), bits, 1) == one);
        }
        // random arrays
        Rng rng(23 + bits);
        for (int trial = 0; trial < 50; ++trial) {
            CodeArray codes(1 + rng.index(97));
            for (auto& c : codes) {
                c = static_cast<std::uint8_t>(rng.index(n_values));
            }
            CHECK(unpack_codes(pack_codes(codes, bits), bits, codes.size()) == codes);
        }
    }
}

TEST_CASE("round-trip bound holds on random matrices") {
    Rng rng(24);
    for (int trial = 0; trial < 10; ++trial) {
        const int bits = std::vector<int>{2, 3, 4, 8}[rng.index(4)];
        const Matrix w = random_matrix(rng, 64, 6, rng.uniform(0.1, 4.0));
        CHECK(roundtrip_max_err_vs_halfscale(w, quantize_groupwise(w, bits, 16)) <= 0.0);
    }
    // constant-group degenerate case round-trips exactly
    const Matrix flat(8, 2, std::vector<double>(16, -1.75));
    const Matrix back = dequantize(quantize_groupwise(flat, 4, 4));
    for (double v : back.data()) {
        CHECK(v == -1.75);
    }
}

TEST_CASE("finer groups never increase the max round-trip error") {
    Rng rng(25);
    for (int trial = 0; trial < 5; ++trial) {
        const Matrix w = random_matrix(rng, 128, 6);
        for (int bits : {2, 4}) {
            auto max_err = [&](std::size_t g) {
                const Matrix back = dequantize(quantize_groupwise(w, bits, g));
                double worst = 0.0;
                for (std::size_t i = 0; i < w.data().size(); ++i) {
                    worst = std::max(worst, std::abs(w.data()[i] - back.data()[i]));
                }
                return worst;
            };
            CHECK(max_err(32) <= max_err(128));
        }
    }
}

TEST_CASE("column-wise quantization is the single-group special case") {
    Rng rng(26);
    const Matrix w = random_matrix(rng, 16, 4);
    const QuantizedMatrix q = quantize_groupwise(w, 4, 16);
    REQUIRE(q.num_groups() == 1);
    for (std::size_t j = 0; j < w.cols(); ++j) {
        std::vector<double> col(w.rows());
        for (std::size_t i = 0; i < w.rows(); ++i) {
            col[i] = w(i, j);
        }
        const MinMaxResult r = quantize_minmax(Vector(col), 4);
        CHECK(q.scales()(0, j) == r.scale);
        CHECK(q.zeros()(0, j) == r.zero);
        for (std::size_t i = 0; i < w.rows(); ++i) {
            CHECK(q.code(i, j) == r.codes[i]);
        }
    }
}

TEST_CASE("rtn_requantize matches quantize_groupwise bitwise") {
    Rng rng(27);
    const Matrix w = random_matrix(rng, 32, 4);
    CHECK(bitwise_equal(rtn_requantize(w, 3, 8), quantize_groupwise(w, 3, 8)));
}

TEST_CASE("rtn on a merged matrix: dense deltas hurt, group-constant deltas do not") {
    Rng rng(28);
    const std::size_t g = 8;
    const Matrix w = random_matrix(rng, 32, 4);
    const QuantizedMatrix q = quantize_groupwise(w, 3, g);
    const Matrix w_tilde = dequantize(q);

    SUBCASE("a dense (non-group-constant) delta leaves residual error") {
        const Matrix delta = random_matrix(rng, 32, 4, 0.3);
        std::vector<double> merged(w_tilde.data().begin(), w_tilde.data().end());
        for (std::size_t i = 0; i < merged.size(); ++i) {
            merged[i] += delta.data()[i];
        }
        const Matrix w_prime(32, 4, std::move(merged));
        const Matrix back = dequantize(rtn_requantize(w_prime, 3, g));
        double worst = 0.0;
        for (std::size_t i = 0; i < back.data().size(); ++i) {
            worst = std::max(worst, std::abs(back.data()[i] - w_prime.data()[i]));
        }
        CHECK(worst > 1e-6);
    }
    SUBCASE("a per-(group, column) constant delta re-quantizes exactly") {
        std::vector<double> merged(w_tilde.data().begin(), w_tilde.data().end());
        Rng rng2(29);
        std::vector<double> offsets(q.num_groups() * 4);
        for (double& c : offsets) {
            c = rng2.uniform(-1.0, 1.0);
        }
        for (std::size_t i = 0; i < 32; ++i) {
            for (std::size_t j = 0; j < 4; ++j) {
                merged[i * 4 + j] += offsets[(i / g) * 4 + j];
            }
        }
        const Matrix w_prime(32, 4, std::move(merged));
        const Matrix back = dequantize(rtn_requantize(w_prime, 3, g));
        for (std::size_t i = 0; i < back.data().size(); ++i) {
            CHECK(std::abs(back.data()[i] - w_prime.data()[i]) <= 1e-12);
        }
    }
    SUBCASE("exactly representable instance is bitwise exact") {
        const Matrix base(4, 1, {0, 1, 2, 3});
        const QuantizedMatrix qb = quantize_groupwise(base, 2, 4);
        const Matrix tilde = dequantize(qb);
        std::vector<double> shifted(tilde.data().begin(), tilde.data().end());
        for (double& v : shifted) {
            v += 0.25;
        }
        const Matrix w_prime(4, 1, std::move(shifted));
        const Matrix back = dequantize(rtn_requantize(w_prime, 2, 4));
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(back(i, 0) == w_prime(i, 0));
        }
    }
}

TEST_CASE("quantized matrix validates its invariants") {
    // scale must be positive
    CHECK_THROWS_AS(QuantizedMatrix(4, 1, 2, 4, std::vector<std::uint8_t>{0},
                                    Matrix(1, 1, {0.0}), Matrix(1, 1)),
                    Error);
    // nonzero padding bits are rejected
    CHECK_THROWS_AS(QuantizedMatrix(3, 1, 2, 3, std::vector<std::uint8_t>{0xC0},
                                    Matrix(1, 1, {1.0}), Matrix(1, 1)),
                    Error);
    // packed size must match the layout
    CHECK_THROWS_AS(QuantizedMatrix(8, 2, 4, 4, std::vector<std::uint8_t>(7, 0),
                                    Matrix(2, 2, {1, 1, 1, 1}), Matrix(2, 2)),
                    Error);
}
