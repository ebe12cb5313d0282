#include "ddae/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>

#include "ddae/error.hpp"
#include "ddae/rng.hpp"

namespace ddae {

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        fail(ErrorCode::invalid_input, std::string(op) + ": shape mismatch " +
                                           std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                           " vs " + std::to_string(b.rows()) + "x" +
                                           std::to_string(b.cols()));
}

// Register-blocked product c = a * b (a: m x kk, b: kk x n, all row-major).
// Every entry is a fused multiply-add chain over k in ascending order starting
// from zero, whatever block it lands in, so results do not depend on how rows
// are split between calls.
typedef double v8d __attribute__((vector_size(64)));

inline v8d load8(const double* p) {
    v8d v;
    std::memcpy(&v, p, sizeof v);
    return v;
}

inline void store8(double* p, v8d v) { std::memcpy(p, &v, sizeof v); }

template <int R, int V>
inline void gemm_block(const double* a, std::size_t kk, const double* b, std::size_t n, std::size_t j,
                       double* c) {
    v8d acc[R][V];
    for (int r = 0; r < R; ++r)
        for (int v = 0; v < V; ++v) acc[r][v] = v8d{};
    for (std::size_t k = 0; k < kk; ++k) {
        const double* bk = b + k * n + j;
        v8d bv[V];
        for (int v = 0; v < V; ++v) bv[v] = load8(bk + 8 * v);
        for (int r = 0; r < R; ++r) {
            const v8d ar = v8d{} + a[r * kk + k];
            for (int v = 0; v < V; ++v) acc[r][v] = ar * bv[v] + acc[r][v];
        }
    }
    for (int r = 0; r < R; ++r)
        for (int v = 0; v < V; ++v) store8(c + r * n + j + 8 * v, acc[r][v]);
}

template <int R>
inline void gemm_tail(const double* a, std::size_t kk, const double* b, std::size_t n, std::size_t j,
                      double* c) {
    for (int r = 0; r < R; ++r) {
        double acc = 0.0;
        for (std::size_t k = 0; k < kk; ++k) acc = std::fma(a[r * kk + k], b[k * n + j], acc);
        c[r * n + j] = acc;
    }
}

template <int R>
void gemm_rows(const double* a, std::size_t kk, const double* b, std::size_t n, double* c) {
    std::size_t j = 0;
    for (; j + 32 <= n; j += 32) gemm_block<R, 4>(a, kk, b, n, j, c);
    for (; j + 8 <= n; j += 8) gemm_block<R, 1>(a, kk, b, n, j, c);
    for (; j < n; ++j) gemm_tail<R>(a, kk, b, n, j, c);
}

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t kk, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) gemm_rows<4>(a + i * kk, kk, b, n, c + i * n);
    for (; i < m; ++i) gemm_rows<1>(a + i * kk, kk, b, n, c + i * n);
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, "Matrix: data length does not match dimensions");
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
        require(row.size() == c, "Matrix::from_rows: ragged rows");
        std::copy(row.begin(), row.end(), m.row(i++).begin());
    }
    return m;
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::diagonal(std::span<const double> d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
}

Vector Matrix::col(std::size_t c) const {
    Vector v(rows_);
    for (std::size_t r = 0; r < rows_; ++r) v[r] = (*this)(r, c);
    return v;
}

void Matrix::set_col(std::size_t c, std::span<const double> values) {
    require(values.size() == rows_ && c < cols_, "Matrix::set_col: shape mismatch");
    for (std::size_t r = 0; r < rows_; ++r) (*this)(r, c) = values[r];
}

void Matrix::set_row(std::size_t r, std::span<const double> values) {
    require(values.size() == cols_ && r < rows_, "Matrix::set_row: shape mismatch");
    std::copy(values.begin(), values.end(), row(r).begin());
}

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

Matrix& Matrix::operator+=(const Matrix& o) {
    check_same_shape(*this, o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& o) {
    check_same_shape(*this, o, "operator-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
}

Matrix& Matrix::operator*=(double s) {
    for (double& x : data_) x *= s;
    return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, double s) { return a *= s; }

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        fail(ErrorCode::invalid_input, "matmul: inner dimensions " + std::to_string(a.cols()) +
                                           " and " + std::to_string(b.rows()) + " differ");
    Matrix c(a.rows(), b.cols());
    gemm(a.data().data(), b.data().data(), c.data().data(), a.rows(), a.cols(), b.cols());
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows())
        fail(ErrorCode::invalid_input, "matmul_tn: row counts " + std::to_string(a.rows()) +
                                           " and " + std::to_string(b.rows()) + " differ");
    return matmul(transpose(a), b);
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols())
        fail(ErrorCode::invalid_input, "matmul_nt: column counts " + std::to_string(a.cols()) +
                                           " and " + std::to_string(b.cols()) + " differ");
    return matmul(a, transpose(b));
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) t(c, r) = a(r, c);
    return t;
}

Vector matvec(const Matrix& a, std::span<const double> x) {
    require(a.cols() == x.size(), "matvec: dimension mismatch");
    Vector y(a.rows());
    for (std::size_t r = 0; r < a.rows(); ++r) y[r] = dot(a.row(r), x);
    return y;
}

Vector matvec_t(const Matrix& a, std::span<const double> x) {
    require(a.rows() == x.size(), "matvec_t: dimension mismatch");
    Vector y(a.cols(), 0.0);
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const auto ar = a.row(r);
        for (std::size_t c = 0; c < a.cols(); ++c) y[c] += x[r] * ar[c];
    }
    return y;
}

double dot(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size(), "dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double frobenius_norm(const Matrix& a) { return norm(a.data()); }

Vector column_means(const Matrix& a) {
    Vector mean(a.cols(), 0.0);
    if (a.rows() == 0) return mean;
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const auto ar = a.row(r);
        for (std::size_t c = 0; c < a.cols(); ++c) mean[c] += ar[c];
    }
    for (double& m : mean) m /= static_cast<double>(a.rows());
    return mean;
}

Matrix center_rows(const Matrix& a, std::span<const double> mean) {
    require(mean.size() == a.cols(), "center_rows: mean length mismatch");
    Matrix out = a;
    for (std::size_t r = 0; r < a.rows(); ++r) {
        auto row = out.row(r);
        for (std::size_t c = 0; c < a.cols(); ++c) row[c] -= mean[c];
    }
    return out;
}

Matrix hstack(const Matrix& left, const Matrix& right) {
    require(left.rows() == right.rows() || left.cols() == 0 || right.cols() == 0,
            "hstack: row counts differ");
    const std::size_t rows = std::max(left.rows(), right.rows());
    Matrix out(rows, left.cols() + right.cols());
    for (std::size_t r = 0; r < rows; ++r) {
        auto o = out.row(r);
        if (left.cols()) std::copy_n(left.row(r).begin(), left.cols(), o.begin());
        if (right.cols()) std::copy_n(right.row(r).begin(), right.cols(), o.begin() + left.cols());
    }
    return out;
}

Matrix vstack(const Matrix& top, const Matrix& bottom) {
    if (top.empty()) return bottom;
    if (bottom.empty()) return top;
    require(top.cols() == bottom.cols(), "vstack: column counts differ");
    std::vector<double> data(top.data().begin(), top.data().end());
    data.insert(data.end(), bottom.data().begin(), bottom.data().end());
    return Matrix(top.rows() + bottom.rows(), top.cols(), std::move(data));
}

Matrix take_columns(const Matrix& a, std::size_t first, std::size_t count) {
    require(first + count <= a.cols(), "take_columns: range out of bounds");
    Matrix out(a.rows(), count);
    for (std::size_t r = 0; r < a.rows(); ++r)
        std::copy_n(a.row(r).begin() + first, count, out.row(r).begin());
    return out;
}

Matrix take_rows(const Matrix& a, std::span<const std::size_t> idx) {
    Matrix out(idx.size(), a.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        require(idx[i] < a.rows(), "take_rows: index out of range");
        out.set_row(i, a.row(idx[i]));
    }
    return out;
}

double orthonormality_defect(const Matrix& q) {
    const Matrix g = matmul_tn(q, q);
    double worst = 0.0;
    for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j)
            worst = std::max(worst, std::abs(g(i, j) - (i == j ? 1.0 : 0.0)));
    return worst;
}

namespace {

constexpr double kJacobiTolerance = 1e-12;
constexpr int kMaxSweeps = 60;

// One-sided Jacobi on the rows of w (the columns of the original matrix).
// Applies the same rotations to the rows of vt. Requires w.rows() <= w.cols().
void jacobi_sweeps(Matrix& w, Matrix& vt) {
    const std::size_t n = w.rows();
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                auto wp = w.row(p);
                auto wq = w.row(q);
                const double alpha = dot(wp, wp);
                const double beta = dot(wq, wq);
                const double gamma = dot(wp, wq);
                if (gamma == 0.0 || std::abs(gamma) <= kJacobiTolerance * std::sqrt(alpha * beta))
                    continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                auto rotate = [c, s](std::span<double> x, std::span<double> y) {
                    for (std::size_t i = 0; i < x.size(); ++i) {
                        const double xi = x[i], yi = y[i];
                        x[i] = c * xi - s * yi;
                        y[i] = s * xi + c * yi;
                    }
                };
                rotate(wp, wq);
                rotate(vt.row(p), vt.row(q));
            }
        }
        if (!rotated) return;
    }
}

// SVD for a with rows >= cols; returns u (m x n), sigma, vt (n x n) unsorted
// except for the final ordering / sign pass done by the caller.
SvdResult svd_tall(const Matrix& a) {
    const std::size_t m = a.rows(), n = a.cols();
    Matrix w = transpose(a);  // row j = column j of a
    Matrix vt = Matrix::identity(n);
    jacobi_sweeps(w, vt);

    Vector sigma(n);
    for (std::size_t j = 0; j < n; ++j) sigma[j] = norm(w.row(j));

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    const double smax = n ? sigma[order[0]] : 0.0;
    const double zero_cut = smax * static_cast<double>(std::max(m, n)) * 1e-15;

    SvdResult r{Matrix(m, n), Vector(n), Matrix(n, n)};
    std::vector<std::size_t> missing;
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = order[j];
        r.sigma[j] = sigma[src];
        r.vt.set_row(j, vt.row(src));
        if (sigma[src] > zero_cut && sigma[src] > 0.0) {
            for (std::size_t i = 0; i < m; ++i) r.u(i, j) = w(src, i) / sigma[src];
        } else {
            r.sigma[j] = 0.0;
            missing.push_back(j);
        }
    }
    if (!missing.empty()) {
        // null singular values: any orthonormal completion is a valid u column
        const std::size_t good = n - missing.size();
        Matrix basis = take_columns(r.u, 0, good);
        reorthonormalize_columns(basis);
        Matrix fill = orthonormal_complement(basis, m - good);
        for (std::size_t i = 0; i < missing.size(); ++i) r.u.set_col(missing[i], fill.col(i));
    }
    return r;
}

}  // namespace

SvdResult svd(const Matrix& a) {
    require(a.rows() >= 1 && a.cols() >= 1, "svd: empty matrix");
    if (!a.all_finite()) fail(ErrorCode::invalid_input, "svd: non-finite input");

    SvdResult r;
    if (a.rows() >= a.cols()) {
        r = svd_tall(a);
    } else {
        // a^T = V S U^T
        SvdResult t = svd_tall(transpose(a));
        r.u = transpose(t.vt);
        r.sigma = std::move(t.sigma);
        r.vt = transpose(t.u);
    }

    // sign convention on right singular vectors
    for (std::size_t j = 0; j < r.vt.rows(); ++j) {
        auto v = r.vt.row(j);
        std::size_t arg = 0;
        for (std::size_t i = 1; i < v.size(); ++i)
            if (std::abs(v[i]) > std::abs(v[arg])) arg = i;
        if (v[arg] < 0.0) {
            for (double& x : v) x = -x;
            for (std::size_t i = 0; i < r.u.rows(); ++i) r.u(i, j) = -r.u(i, j);
        }
    }
    return r;
}

void reorthonormalize_columns(Matrix& q) {
    const std::size_t m = q.rows(), n = q.cols();
    Matrix t = transpose(q);
    for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t j = 0; j < n; ++j) {
            auto tj = t.row(j);
            for (std::size_t i = 0; i < j; ++i) {
                const auto ti = t.row(i);
                const double p = dot(ti, tj);
                for (std::size_t k = 0; k < m; ++k) tj[k] -= p * ti[k];
            }
            const double len = norm(tj);
            if (len < 1e-12) fail(ErrorCode::invalid_input, "reorthonormalize_columns: rank-deficient columns");
            for (double& x : tj) x /= len;
        }
    }
    q = transpose(t);
}

Matrix orthonormal_complement(const Matrix& b, std::size_t target_cols) {
    const std::size_t m = b.rows();
    require(b.cols() + target_cols <= m, "orthonormal_complement: target_cols exceeds rows - cols");
    if (!b.all_finite()) fail(ErrorCode::invalid_input, "orthonormal_complement: non-finite basis");
    if (b.cols() > 0 && orthonormality_defect(b) > 1e-6)
        fail(ErrorCode::invalid_input, "orthonormal_complement: basis is rank-deficient or not orthonormal");

    // basis vectors as contiguous rows
    std::vector<Vector> basis;
    basis.reserve(b.cols() + target_cols);
    for (std::size_t j = 0; j < b.cols(); ++j) basis.push_back(b.col(j));

    SeededRng rng(0x0c0ffee5eedULL);
    Matrix out(m, target_cols);
    std::size_t made = 0;
    int attempts = 0;
    while (made < target_cols) {
        if (++attempts > static_cast<int>(64 * (target_cols + 1)))
            fail(ErrorCode::numerical_failure, "orthonormal_complement: could not complete basis");
        Vector v(m);
        for (double& x : v) x = rng.normal();
        const double start = norm(v);
        for (int pass = 0; pass < 2; ++pass) {
            for (const Vector& e : basis) {
                const double p = dot(e, v);
                for (std::size_t k = 0; k < m; ++k) v[k] -= p * e[k];
            }
        }
        const double len = norm(v);
        if (len < 1e-6 * start) continue;
        for (double& x : v) x /= len;
        out.set_col(made++, v);
        basis.push_back(std::move(v));
    }
    return out;
}

Vector solve_spd(const Matrix& a, std::span<const double> rhs) {
    const std::size_t n = a.rows();
    require(a.cols() == n && rhs.size() == n, "solve_spd: dimension mismatch");
    Matrix l(n, n);
    double max_diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, std::abs(a(i, i)));
    const double floor = std::max(max_diag, 1e-300) * 1e-13;
    for (std::size_t j = 0; j < n; ++j) {
        double d = a(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
        if (!(d > floor))
            fail(ErrorCode::singularity, "solve_spd: matrix is singular or not positive definite at pivot " +
                                             std::to_string(j));
        l(j, j) = std::sqrt(d);
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / l(j, j);
        }
    }
    Vector y(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = rhs[i];
        for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
        y[i] = s / l(i, i);
    }
    Vector x(n);
    for (std::size_t ii = n; ii-- > 0;) {
        double s = y[ii];
        for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x[k];
        x[ii] = s / l(ii, ii);
    }
    return x;
}

}  // namespace ddae
