#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "qalora/numkit.hpp"
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

// Independent oracle: per-entry dot products, same ascending reduction order
// as the contract demands, written without reuse of matmul's loop structure.
Matrix naive_matmul(const Matrix& a, const Matrix& b) {
    std::vector<double> out(a.rows() * b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (std::size_t r = 0; r < a.cols(); ++r) {
                acc += a(i, r) * b(r, j);
            }
            out[i * b.cols() + j] = acc;
        }
    }
    return Matrix(a.rows(), b.cols(), std::move(out));
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i) {
        worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    }
    return worst;
}

double frobenius(const Matrix& m) {
    double sq = 0.0;
    for (double v : m.data()) {
        sq += v * v;
    }
    return std::sqrt(sq);
}

} // namespace

TEST_CASE("matrix constructors enforce invariants") {
    CHECK_THROWS_AS(Matrix(2, 2, {1.0, 2.0, 3.0}), Error);
    CHECK_THROWS_AS(Matrix(1, 2, {1.0, std::numeric_limits<double>::quiet_NaN()}), Error);
    CHECK_THROWS_AS(Matrix(1, 1, {std::numeric_limits<double>::infinity()}), Error);
    CHECK_THROWS_AS(Vector({1.0, std::numeric_limits<double>::quiet_NaN()}), Error);
    const Matrix m(3, 4);
    CHECK(m.rows() == 3);
    CHECK(m.cols() == 4);
    for (double v : m.data()) {
        CHECK(v == 0.0);
    }
}

TEST_CASE("matmul identity and hand-checked product") {
    const Matrix eye = Matrix::from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
    Rng rng(11);
    const Matrix m = random_matrix(rng, 3, 5);
    const Matrix im = matmul(eye, m);
    for (std::size_t i = 0; i < m.data().size(); ++i) {
        CHECK(im.data()[i] == m.data()[i]);
    }

    const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
    const Matrix b = Matrix::from_rows({{5}, {6}});
    const Matrix c = matmul(a, b);
    CHECK(c(0, 0) == 17.0);
    CHECK(c(1, 0) == 39.0);
}

TEST_CASE("matmul equals the naive triple-loop oracle exactly") {
    Rng rng(12);
    const Matrix a = random_matrix(rng, 7, 5);
    const Matrix b = random_matrix(rng, 5, 3);
    const Matrix got = matmul(a, b);
    const Matrix want = naive_matmul(a, b);
    for (std::size_t i = 0; i < got.data().size(); ++i) {
        CHECK(got.data()[i] == want.data()[i]); // bitwise, fixed reduction order
    }
}

TEST_CASE("matmul rejects mismatched shapes") {
    CHECK_THROWS_AS(matmul(Matrix(2, 3), Matrix(2, 3)), Error);
}

TEST_CASE("matmul associativity within 1e-9 relative") {
    Rng rng(13);
    for (int trial = 0; trial < 10; ++trial) {
        const Matrix a = random_matrix(rng, 6, 4);
        const Matrix b = random_matrix(rng, 4, 7);
        const Matrix c = random_matrix(rng, 7, 5);
        const Matrix left = matmul(matmul(a, b), c);
        const Matrix right = matmul(a, matmul(b, c));
        CHECK(max_abs_diff(left, right) <= 1e-9 * std::max(1.0, frobenius(left)));
    }
}

TEST_CASE("group_sum_pool worked examples") {
    const Vector x{1, 2, 3, 4, 5, 6};
    const Vector pooled = group_sum_pool(x, 3);
    REQUIRE(pooled.size() == 2);
    CHECK(pooled[0] == 6.0);
    CHECK(pooled[1] == 15.0);

    const Vector same = group_sum_pool(x, 1);
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(same[i] == x[i]);
    }

    // whole-vector window equals a direct summation oracle
    const Vector whole = group_sum_pool(x, 6);
    double sum = 0.0;
    for (double v : x) {
        sum += v;
    }
    REQUIRE(whole.size() == 1);
    CHECK(whole[0] == doctest::Approx(sum).epsilon(1e-15));

    CHECK_THROWS_AS(group_sum_pool(x, 4), Error);
    CHECK_THROWS_AS(group_sum_pool(x, 0), Error);
}

TEST_CASE("group_sum_pool is linear") {
    Rng rng(14);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> xd(24), yd(24);
        for (auto& v : xd) {
            v = rng.normal();
        }
        for (auto& v : yd) {
            v = rng.normal();
        }
        const double alpha = rng.uniform(-2, 2), beta = rng.uniform(-2, 2);
        std::vector<double> mix(24);
        for (std::size_t i = 0; i < 24; ++i) {
            mix[i] = alpha * xd[i] + beta * yd[i];
        }
        const Vector px = group_sum_pool(Vector(xd), 4);
        const Vector py = group_sum_pool(Vector(yd), 4);
        const Vector pm = group_sum_pool(Vector(mix), 4);
        for (std::size_t k = 0; k < pm.size(); ++k) {
            CHECK(std::abs(pm[k] - (alpha * px[k] + beta * py[k])) <= 1e-12);
        }
    }
}

TEST_CASE("numeric_rank worked examples") {
    // outer product u v^T has rank one by construction
    const Matrix u(4, 1, {1.0, -2.0, 0.5, 3.0});
    const Matrix v(1, 5, {2.0, 1.0, -1.0, 0.25, 4.0});
    CHECK(numeric_rank(matmul(u, v), 1e-9) == 1);

    const Matrix eye =
        Matrix::from_rows({{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}});
    CHECK(numeric_rank(eye, 1e-9) == 4);

    // product of 6x2 and 2x6 factors has rank forced to 2
    Rng rng(15);
    const Matrix f1 = random_matrix(rng, 6, 2);
    const Matrix f2 = random_matrix(rng, 2, 6);
    CHECK(numeric_rank(matmul(f1, f2), 1e-9) == 2);

    CHECK_THROWS_AS(numeric_rank(Matrix(), 1e-9), Error);
    CHECK_THROWS_AS(numeric_rank(eye, 0.0), Error);
    CHECK(numeric_rank(Matrix(3, 3), 1e-9) == 0); // zero matrix
}

TEST_CASE("rank of a product never exceeds factor ranks") {
    Rng rng(16);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t m = 3 + rng.index(5);
        const std::size_t k = 1 + rng.index(4);
        const std::size_t n = 3 + rng.index(5);
        const Matrix a = random_matrix(rng, m, k);
        const Matrix b = random_matrix(rng, k, n);
        const std::size_t ra = numeric_rank(a, 1e-9);
        const std::size_t rb = numeric_rank(b, 1e-9);
        CHECK(numeric_rank(matmul(a, b), 1e-9) <= std::min(ra, rb));
    }
}
