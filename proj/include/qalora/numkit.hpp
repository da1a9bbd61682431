#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include "qalora/errors.hpp"

namespace qalora {

// Dense row-major matrix of 64-bit reals. Constructors reject NaN/Inf and
// instances never change after construction, so they can be shared across
// threads without synchronization.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols); // zero-filled
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return data_.empty(); }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
    std::span<const double> row(std::size_t i) const {
        return {data_.data() + i * cols_, cols_};
    }
    std::span<const double> data() const { return data_; }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// Fixed-length vector of 64-bit reals with the same finiteness contract.
class Vector {
public:
    Vector() = default;
    explicit Vector(std::size_t len); // zero-filled
    explicit Vector(std::vector<double> data);
    Vector(std::initializer_list<double> vals);

    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    double operator[](std::size_t i) const { return data_[i]; }
    std::span<const double> data() const { return data_; }
    auto begin() const { return data_.begin(); }
    auto end() const { return data_.end(); }

private:
    std::vector<double> data_;
};

// c[i][j] = sum_r a[i][r]*b[r][j], accumulated in 64-bit floats with a fixed
// reduction order (r ascending), so results are bitwise deterministic.
Matrix matmul(const Matrix& a, const Matrix& b);

// Non-overlapping window sums: out[k] = sum of x[k*g .. k*g+g-1].
// Requires g >= 1 and g | x.size().
Vector group_sum_pool(const Vector& x, std::size_t group_size);

// Rank by Gaussian elimination with partial pivoting; pivots with magnitude
// <= tol * max|entry| count as zero. Default tol sits far above elimination
// noise at the matrix sizes used here (<= 1024).
std::size_t numeric_rank(const Matrix& m, double tol = 1e-9);

} // namespace qalora
