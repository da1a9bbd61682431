#include "qalora/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

namespace qalora {

namespace {

void check_finite(std::span<const double> vals, const char* what) {
    for (std::size_t i = 0; i < vals.size(); ++i) {
        if (!std::isfinite(vals[i])) {
            throw Error(std::string(what) + ": non-finite entry at index " +
                        std::to_string(i));
        }
    }
}

} // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw Error("Matrix: data length " + std::to_string(data_.size()) +
                    " does not match shape " + std::to_string(rows_) + "x" +
                    std::to_string(cols_));
    }
    check_finite(data_, "Matrix");
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) {
            throw Error("Matrix::from_rows: ragged rows");
        }
        data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
}

Vector::Vector(std::size_t len) : data_(len, 0.0) {}

Vector::Vector(std::vector<double> data) : data_(std::move(data)) {
    check_finite(data_, "Vector");
}

Vector::Vector(std::initializer_list<double> vals) : data_(vals) {
    check_finite(data_, "Vector");
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw Error("matmul: shape mismatch " + std::to_string(a.rows()) + "x" +
                    std::to_string(a.cols()) + " * " + std::to_string(b.rows()) +
                    "x" + std::to_string(b.cols()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* out_row = out.data() + i * n;
        for (std::size_t r = 0; r < k; ++r) {
            const double av = a(i, r);
            const double* b_row = b.data().data() + r * n;
            for (std::size_t j = 0; j < n; ++j) {
                out_row[j] += av * b_row[j];
            }
        }
    }
    return Matrix(m, n, std::move(out));
}

Vector group_sum_pool(const Vector& x, std::size_t group_size) {
    if (group_size < 1) {
        throw Error("group_sum_pool: group size must be >= 1");
    }
    if (x.size() % group_size != 0) {
        throw Error("group_sum_pool: group size " + std::to_string(group_size) +
                    " does not divide length " + std::to_string(x.size()));
    }
    const std::size_t n_out = x.size() / group_size;
    std::vector<double> out(n_out, 0.0);
    for (std::size_t k = 0; k < n_out; ++k) {
        double acc = 0.0;
        for (std::size_t r = 0; r < group_size; ++r) {
            acc += x[k * group_size + r];
        }
        out[k] = acc;
    }
    return Vector(std::move(out));
}

std::size_t numeric_rank(const Matrix& m, double tol) {
    if (m.rows() == 0 || m.cols() == 0) {
        throw Error("numeric_rank: empty matrix");
    }
    if (!(tol > 0.0)) {
        throw Error("numeric_rank: tol must be > 0");
    }
    const std::size_t n_rows = m.rows(), n_cols = m.cols();
    std::vector<double> a(m.data().begin(), m.data().end());
    double max_abs = 0.0;
    for (double v : a) {
        max_abs = std::max(max_abs, std::abs(v));
    }
    const double threshold = tol * max_abs;

    std::size_t rank = 0;
    std::size_t pivot_row = 0;
    for (std::size_t col = 0; col < n_cols && pivot_row < n_rows; ++col) {
        std::size_t best = pivot_row;
        for (std::size_t r = pivot_row + 1; r < n_rows; ++r) {
            if (std::abs(a[r * n_cols + col]) > std::abs(a[best * n_cols + col])) {
                best = r;
            }
        }
        if (std::abs(a[best * n_cols + col]) <= threshold) {
            continue; // column has no usable pivot
        }
        if (best != pivot_row) {
            for (std::size_t c = col; c < n_cols; ++c) {
                std::swap(a[best * n_cols + c], a[pivot_row * n_cols + c]);
            }
        }
        const double pivot = a[pivot_row * n_cols + col];
        for (std::size_t r = pivot_row + 1; r < n_rows; ++r) {
            const double f = a[r * n_cols + col] / pivot;
            if (f == 0.0) {
                continue;
            }
            for (std::size_t c = col; c < n_cols; ++c) {
                a[r * n_cols + c] -= f * a[pivot_row * n_cols + c];
            }
        }
        ++rank;
        ++pivot_row;
    }
    return rank;
}

} // namespace qalora
