#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace svf {

class SeededRng;

// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);
    static Matrix random_normal(std::size_t rows, std::size_t cols, SeededRng& rng, double stddev = 1.0);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }
    const std::vector<double>& data() const { return data_; }

    Matrix transposed() const;
    bool all_finite() const;
    double frobenius_norm() const;
    void fill(double v);

    Matrix& operator+=(const Matrix& other);
    Matrix& operator-=(const Matrix& other);
    Matrix& operator*=(double s);

    bool same_shape(const Matrix& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }
    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);

double max_abs_diff(const Matrix& a, const Matrix& b);

// Product kernels. The plain names are OpenMP-parallel over output rows once
// the work is large enough to amortize the fork; the *_serial variants are
// the straightforward reference loops the parallel versions are tested
// against. Both accumulate in the same order, so results are bit-identical.
Matrix matmul(const Matrix& a, const Matrix& b);        // A * B
Matrix matmul_tn(const Matrix& a, const Matrix& b);     // A^T * B
Matrix matmul_nt(const Matrix& a, const Matrix& b);     // A * B^T
Matrix matmul_serial(const Matrix& a, const Matrix& b);
Matrix matmul_tn_serial(const Matrix& a, const Matrix& b);
Matrix matmul_nt_serial(const Matrix& a, const Matrix& b);

// C += A^T * B, used to accumulate weight gradients in place.
void add_matmul_tn(Matrix& c, const Matrix& a, const Matrix& b);

// Thin factors of W = U diag(sigma) V^T with r = min(rows, cols).
struct SvdFactors {
    Matrix u;                   // n x r, orthonormal columns
    std::vector<double> sigma;  // r values, descending, non-negative
    Matrix vt;                  // r x m, orthonormal rows

    std::size_t rank() const { return sigma.size(); }
    std::size_t rows() const { return u.rows(); }
    std::size_t cols() const { return vt.cols(); }

    friend bool operator==(const SvdFactors&, const SvdFactors&) = default;
};

// One-sided (Hestenes) Jacobi SVD. Deterministic: the sweep order is fixed,
// equal singular values keep their original column order, and each u_i is
// signed so its largest-magnitude entry is non-negative (v_i flips with it).
// Throws InvalidMatrix on non-finite input or an empty matrix.
SvdFactors svd(const Matrix& w);

// U * diag(sigma) * V^T. Throws ShapeError on inconsistent factors.
Matrix reconstruct(const SvdFactors& f);

// Element i is u_i^T G v_i. Throws ShapeError unless G is rows() x cols().
std::vector<double> rank1_contraction(const SvdFactors& f, const Matrix& g);
std::vector<double> rank1_contraction_serial(const SvdFactors& f, const Matrix& g);

// U * diag(scale) * V^T for an arbitrary per-component scale vector.
Matrix scaled_reconstruct(const SvdFactors& f, std::span<const double> scale);

}  // namespace svf
