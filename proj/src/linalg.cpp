#include "svf/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "svf/errors.hpp"
#include "svf/rng.hpp"

namespace svf {

namespace {

// Below this many multiply-adds the OpenMP fork costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 16;

void require_inner(std::size_t a, std::size_t b, const char* op) {
    if (a != b) {
        throw ShapeError(std::string(op) + ": inner dimensions " + std::to_string(a) + " and " + std::to_string(b));
    }
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// Four partial sums so the compiler can vectorise the reduction.
double dot4(const double* a, const double* b, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

// Runs f(i) for i < n, in parallel only when the product is big enough.
template <class F>
void for_rows(std::size_t n, std::size_t work, F&& f) {
    if (work > kParallelWork) {
        const auto nn = static_cast<long long>(n);
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < nn; ++i) f(static_cast<std::size_t>(i));
    } else {
        for (std::size_t i = 0; i < n; ++i) f(i);
    }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != " + std::to_string(rows_) + "x" +
                         std::to_string(cols_));
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::random_normal(std::size_t rows, std::size_t cols, SeededRng& rng, double stddev) {
    Matrix m(rows, cols);
    for (auto& x : m.data_) x = rng.normal(0.0, stddev);
    return m;
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
        for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
}

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

double Matrix::frobenius_norm() const { return std::sqrt(dot(data_, data_)); }

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Matrix& Matrix::operator+=(const Matrix& other) {
    if (!same_shape(other)) throw ShapeError("matrix +=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
    if (!same_shape(other)) throw ShapeError("matrix -=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Matrix& Matrix::operator*=(double s) {
    for (auto& x : data_) x *= s;
    return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, double s) { return a *= s; }

double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
    return m;
}

// ---------------------------------------------------------------------------
// products

Matrix matmul_serial(const Matrix& a, const Matrix& b) {
    require_inner(a.cols(), b.rows(), "matmul");
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto crow = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            auto brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    require_inner(a.cols(), b.rows(), "matmul");
    Matrix c(a.rows(), b.cols());
    for_rows(a.rows(), a.rows() * a.cols() * b.cols(), [&](std::size_t i) {
        auto crow = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            auto brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
        }
    });
    return c;
}

Matrix matmul_tn_serial(const Matrix& a, const Matrix& b) {
    require_inner(a.rows(), b.rows(), "matmul_tn");
    Matrix c(a.cols(), b.cols());
    for (std::size_t i = 0; i < a.cols(); ++i) {
        auto crow = c.row(i);
        for (std::size_t k = 0; k < a.rows(); ++k) {
            const double aki = a(k, i);
            auto brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aki * brow[j];
        }
    }
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    require_inner(a.rows(), b.rows(), "matmul_tn");
    Matrix c(a.cols(), b.cols());
    for_rows(a.cols(), a.rows() * a.cols() * b.cols(), [&](std::size_t i) {
        auto crow = c.row(i);
        for (std::size_t k = 0; k < a.rows(); ++k) {
            const double aki = a(k, i);
            auto brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aki * brow[j];
        }
    });
    return c;
}

Matrix matmul_nt_serial(const Matrix& a, const Matrix& b) {
    require_inner(a.cols(), b.cols(), "matmul_nt");
    Matrix c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) c(i, j) = dot4(a.row(i).data(), b.row(j).data(), a.cols());
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    require_inner(a.cols(), b.cols(), "matmul_nt");
    Matrix c(a.rows(), b.rows());
    for_rows(a.rows(), a.rows() * a.cols() * b.rows(), [&](std::size_t i) {
        const double* ar = a.row(i).data();
        for (std::size_t j = 0; j < b.rows(); ++j) c(i, j) = dot4(ar, b.row(j).data(), a.cols());
    });
    return c;
}

void add_matmul_tn(Matrix& c, const Matrix& a, const Matrix& b) {
    require_inner(a.rows(), b.rows(), "add_matmul_tn");
    if (c.rows() != a.cols() || c.cols() != b.cols()) throw ShapeError("add_matmul_tn: output shape");
    for (std::size_t k = 0; k < a.rows(); ++k) {
        auto arow = a.row(k);
        auto brow = b.row(k);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = arow[i];
            if (aki == 0.0) continue;
            auto crow = c.row(i);
            for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aki * brow[j];
        }
    }
}

// ---------------------------------------------------------------------------
// SVD

namespace {

constexpr int kMaxSweeps = 80;

// Replaces row `idx` of `basis` (whose other listed rows are orthonormal) with
// a unit vector orthogonal to them, built from the first usable standard
// basis vector.
void complete_basis_row(Matrix& basis, std::size_t idx, const std::vector<std::size_t>& orthonormal_rows) {
    const std::size_t dim = basis.cols();
    for (std::size_t e = 0; e < dim; ++e) {
        std::vector<double> cand(dim, 0.0);
        cand[e] = 1.0;
        for (int pass = 0; pass < 2; ++pass) {
            for (auto r : orthonormal_rows) {
                const double p = dot(cand, basis.row(r));
                auto row = basis.row(r);
                for (std::size_t k = 0; k < dim; ++k) cand[k] -= p * row[k];
            }
        }
        const double norm = std::sqrt(dot(cand, cand));
        if (norm > 0.5) {
            auto out = basis.row(idx);
            for (std::size_t k = 0; k < dim; ++k) out[k] = cand[k] / norm;
            return;
        }
    }
}

}  // namespace

SvdFactors svd(const Matrix& w) {
    if (w.rows() == 0 || w.cols() == 0) throw InvalidMatrix("svd of an empty matrix");
    if (!w.all_finite()) throw InvalidMatrix("svd input has non-finite entries");

    // Work on the tall orientation. Columns of the working matrix are stored
    // as rows of `cols` so every rotation touches contiguous memory.
    const bool tall = w.rows() >= w.cols();
    Matrix cols = tall ? w.transposed() : w;  // q x p, q <= p
    const std::size_t q = cols.rows();
    const std::size_t p = cols.cols();
    Matrix vrows = Matrix::identity(q);  // rows are the right singular vectors

    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t i = 0; i + 1 < q; ++i) {
            for (std::size_t j = i + 1; j < q; ++j) {
                auto ci = cols.row(i);
                auto cj = cols.row(j);
                const double alpha = dot(ci, ci);
                const double beta = dot(cj, cj);
                const double gamma = dot(ci, cj);
                if (gamma == 0.0 || std::abs(gamma) <= 1e-15 * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t k = 0; k < p; ++k) {
                    const double x = ci[k];
                    const double y = cj[k];
                    ci[k] = c * x - s * y;
                    cj[k] = s * x + c * y;
                }
                auto vi = vrows.row(i);
                auto vj = vrows.row(j);
                for (std::size_t k = 0; k < q; ++k) {
                    const double x = vi[k];
                    const double y = vj[k];
                    vi[k] = c * x - s * y;
                    vj[k] = s * x + c * y;
                }
            }
        }
        if (!rotated) break;
    }

    std::vector<double> norms(q);
    for (std::size_t i = 0; i < q; ++i) norms[i] = std::sqrt(dot(cols.row(i), cols.row(i)));
    std::vector<std::size_t> order(q);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });

    const double smax = norms[order[0]];
    const double null_tol = smax * 1e-13;

    // left: r x p (rows are left vectors of the working matrix); right: r x q.
    Matrix left(q, p);
    Matrix right(q, q);
    std::vector<double> sigma(q);
    std::vector<std::size_t> good;
    std::vector<std::size_t> null_rows;
    for (std::size_t k = 0; k < q; ++k) {
        const std::size_t src = order[k];
        auto rsrc = vrows.row(src);
        std::copy(rsrc.begin(), rsrc.end(), right.row(k).begin());
        if (norms[src] > null_tol && norms[src] > 0.0) {
            sigma[k] = norms[src];
            auto lsrc = cols.row(src);
            auto ldst = left.row(k);
            for (std::size_t t = 0; t < p; ++t) ldst[t] = lsrc[t] / norms[src];
            good.push_back(k);
        } else {
            sigma[k] = 0.0;
            null_rows.push_back(k);
        }
    }
    for (auto k : null_rows) {
        complete_basis_row(left, k, good);
        good.push_back(k);
    }

    // Sign convention on the column that ends up as u_i.
    Matrix& urows = tall ? left : right;
    Matrix& vsrows = tall ? right : left;
    for (std::size_t k = 0; k < q; ++k) {
        auto ur = urows.row(k);
        std::size_t arg = 0;
        for (std::size_t t = 1; t < ur.size(); ++t)
            if (std::abs(ur[t]) > std::abs(ur[arg])) arg = t;
        if (ur[arg] < 0.0) {
            for (auto& x : ur) x = -x;
            for (auto& x : vsrows.row(k)) x = -x;
        }
    }

    SvdFactors f;
    f.u = urows.transposed();
    f.vt = vsrows;
    f.sigma = std::move(sigma);
    return f;
}

namespace {

void check_factors(const SvdFactors& f) {
    const std::size_t r = f.sigma.size();
    if (f.u.cols() != r || f.vt.rows() != r) {
        throw ShapeError("factor shapes inconsistent: u " + std::to_string(f.u.rows()) + "x" +
                         std::to_string(f.u.cols()) + ", sigma " + std::to_string(r) + ", vt " +
                         std::to_string(f.vt.rows()) + "x" + std::to_string(f.vt.cols()));
    }
}

}  // namespace

Matrix scaled_reconstruct(const SvdFactors& f, std::span<const double> scale) {
    check_factors(f);
    if (scale.size() != f.rank()) throw ShapeError("scale length " + std::to_string(scale.size()) + " != rank " + std::to_string(f.rank()));
    Matrix us = f.u;
    for (std::size_t i = 0; i < us.rows(); ++i) {
        auto row = us.row(i);
        for (std::size_t k = 0; k < row.size(); ++k) row[k] *= f.sigma[k] * scale[k];
    }
    return matmul(us, f.vt);
}

Matrix reconstruct(const SvdFactors& f) {
    check_factors(f);
    std::vector<double> ones(f.rank(), 1.0);
    return scaled_reconstruct(f, ones);
}

std::vector<double> rank1_contraction_serial(const SvdFactors& f, const Matrix& g) {
    check_factors(f);
    if (g.rows() != f.rows() || g.cols() != f.cols()) throw ShapeError("rank1_contraction: gradient shape");
    const Matrix gv = matmul_nt_serial(g, f.vt);
    std::vector<double> out(f.rank(), 0.0);
    for (std::size_t i = 0; i < f.rank(); ++i) {
        double s = 0.0;
        for (std::size_t a = 0; a < gv.rows(); ++a) s += f.u(a, i) * gv(a, i);
        out[i] = s;
    }
    return out;
}

std::vector<double> rank1_contraction(const SvdFactors& f, const Matrix& g) {
    check_factors(f);
    if (g.rows() != f.rows() || g.cols() != f.cols()) throw ShapeError("rank1_contraction: gradient shape");
    // G V is n x r; column i dotted with u_i gives u_i^T G v_i.
    const Matrix gv = matmul_nt(g, f.vt);
    std::vector<double> out(f.rank(), 0.0);
    const auto r = static_cast<long long>(f.rank());
#pragma omp parallel for schedule(static) if (g.size() * f.rank() > kParallelWork)
    for (long long ii = 0; ii < r; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        double s = 0.0;
        for (std::size_t a = 0; a < gv.rows(); ++a) s += f.u(a, i) * gv(a, i);
        out[i] = s;
    }
    return out;
}

}  // namespace svf
