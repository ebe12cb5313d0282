#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace ddae {

using Vector = std::vector<double>;

// Dense row-major matrix of doubles. Embedding batches, images, weights and
// dictionaries all live in this type.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Matrix identity(std::size_t n);
    static Matrix diagonal(std::span<const double> d);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    Vector col(std::size_t c) const;
    void set_col(std::size_t c, std::span<const double> values);
    void set_row(std::size_t r, std::span<const double> values);

    bool all_finite() const;

    Matrix& operator+=(const Matrix& o);
    Matrix& operator-=(const Matrix& o);
    Matrix& operator*=(double s);

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);

struct SvdResult {
    Matrix u;      // m x k, orthonormal columns
    Vector sigma;  // k values, non-increasing
    Matrix vt;     // k x n, orthonormal rows
};

// Dense kernels. Row i of every product depends only on row i of the left
// operand, so chunking rows across workers never changes results.
Matrix matmul(const Matrix& a, const Matrix& b);     // a * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);  // a^T * b
Matrix matmul_nt(const Matrix& a, const Matrix& b);  // a * b^T
Matrix transpose(const Matrix& a);
Vector matvec(const Matrix& a, std::span<const double> x);    // a * x
Vector matvec_t(const Matrix& a, std::span<const double> x);  // a^T * x

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
double frobenius_norm(const Matrix& a);
Vector column_means(const Matrix& a);
Matrix center_rows(const Matrix& a, std::span<const double> mean);
Matrix hstack(const Matrix& left, const Matrix& right);
Matrix take_columns(const Matrix& a, std::size_t first, std::size_t count);
Matrix take_rows(const Matrix& a, std::span<const std::size_t> idx);
Matrix vstack(const Matrix& top, const Matrix& bottom);

// max |Q^T Q - I| over all entries
double orthonormality_defect(const Matrix& q);

// Thin SVD by one-sided Jacobi rotations. k = min(rows, cols). Right singular
// vectors are sign-normalized so their largest-magnitude entry is >= 0.
SvdResult svd(const Matrix& a);

// Columns spanning the orthogonal complement of span(b). b must have
// orthonormal columns; target_cols <= b.rows() - b.cols().
Matrix orthonormal_complement(const Matrix& b, std::size_t target_cols);

// Re-orthonormalize columns in place (two passes of modified Gram-Schmidt).
void reorthonormalize_columns(Matrix& q);

// Solve a x = rhs for symmetric positive definite a (Cholesky).
Vector solve_spd(const Matrix& a, std::span<const double> rhs);

}  // namespace ddae
