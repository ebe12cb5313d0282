#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "ddae/error.hpp"
#include "ddae/numerics.hpp"
#include "test_util.hpp"

using namespace ddae;
using testutil::max_abs_diff;
using testutil::random_matrix;

namespace {

Matrix schoolbook(const Matrix& a, const Matrix& b) {
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            // fused multiply-add in the same k order as the kernel, so the match is exact
            for (std::size_t k = 0; k < a.cols(); ++k) s = std::fma(a(i, k), b(k, j), s);
            c(i, j) = s;
        }
    return c;
}

Matrix reconstruct(const SvdResult& r) {
    Matrix us = r.u;
    for (std::size_t i = 0; i < us.rows(); ++i)
        for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= r.sigma[j];
    return schoolbook(us, r.vt);
}

// Cyclic Jacobi eigenvalues of a small symmetric matrix.
std::vector<double> jacobi_eigenvalues(Matrix a) {
    const std::size_t n = a.rows();
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (off < 1e-30) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                if (std::abs(a(p, q)) < 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
            }
    }
    std::vector<double> ev(n);
    for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
    std::sort(ev.rbegin(), ev.rend());
    return ev;
}

}  // namespace

TEST_CASE("identity and orthogonal basics") {
    const Matrix a = random_matrix(3, 3, 1);
    CHECK(matmul(a, Matrix::identity(3)) == a);
    const Vector e1{1, 0, 0}, e2{0, 1, 0};
    CHECK(dot(e1, e2) == 0.0);
    CHECK(norm(Vector{3, 4}) == doctest::Approx(5.0));
}

TEST_CASE("matmul variants match the triple loop exactly") {
    const Matrix a = random_matrix(4, 4, 2), b = random_matrix(4, 4, 3);
    CHECK(matmul(a, b) == schoolbook(a, b));
    const Matrix c = random_matrix(5, 7, 4), d = random_matrix(7, 3, 5);
    CHECK(max_abs_diff(matmul(c, d), schoolbook(c, d)) < 1e-12);
    CHECK(max_abs_diff(matmul_tn(transpose(c), d), schoolbook(c, d)) < 1e-12);
    CHECK(max_abs_diff(matmul_nt(c, transpose(d)), schoolbook(c, d)) < 1e-12);
    CHECK_THROWS_AS(matmul(c, c), Error);
}

TEST_CASE("svd of a seeded 8x5 matrix reconstructs") {
    const Matrix a = random_matrix(8, 5, 7);
    const auto r = svd(a);
    CHECK(r.sigma.size() == 5);
    CHECK(max_abs_diff(reconstruct(r), a) < 1e-10);
    CHECK(std::is_sorted(r.sigma.rbegin(), r.sigma.rend()));
}

TEST_CASE("svd property: 500 random matrices up to 16x16") {
    SeededRng rng(11);
    double worst_rec = 0.0, worst_orth = 0.0;
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t m = 1 + rng.below(16), n = 1 + rng.below(16);
        const Matrix a = random_matrix(m, n, 1000 + trial);
        const auto r = svd(a);
        worst_rec = std::max(worst_rec, max_abs_diff(reconstruct(r), a));
        worst_orth = std::max({worst_orth, orthonormality_defect(r.u), orthonormality_defect(transpose(r.vt))});
        for (std::size_t k = 0; k < r.vt.rows(); ++k) {
            double big = 0.0;
            for (std::size_t j = 0; j < r.vt.cols(); ++j)
                if (std::abs(r.vt(k, j)) > std::abs(big)) big = r.vt(k, j);
            CHECK(big >= 0.0);
        }
    }
    CHECK(worst_rec < 1e-8);
    CHECK(worst_orth < 1e-8);
}

TEST_CASE("singular values equal square roots of Jacobi eigenvalues of A^T A") {
    for (std::uint64_t seed = 20; seed < 40; ++seed) {
        const Matrix a = random_matrix(4, 4, seed);
        const auto ev = jacobi_eigenvalues(schoolbook(transpose(a), a));
        const auto r = svd(a);
        for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(r.sigma[i] - std::sqrt(std::max(0.0, ev[i]))) < 1e-8);
    }
}

TEST_CASE("svd handles rank deficiency and zeros") {
    Matrix a(6, 3);
    for (std::size_t i = 0; i < 6; ++i) a(i, 0) = a(i, 1) = static_cast<double>(i);
    const auto r = svd(a);
    CHECK(r.sigma[2] < 1e-12);
    CHECK(max_abs_diff(reconstruct(r), a) < 1e-10);
    const auto z = svd(Matrix(3, 3));
    for (double s : z.sigma) CHECK(s == 0.0);
}

TEST_CASE("orthonormal complement") {
    const Matrix b = testutil::random_orthonormal(8, 3, 5);
    const Matrix c = orthonormal_complement(b, 5);
    CHECK(c.cols() == 5);
    CHECK(orthonormality_defect(c) < 1e-12);
    CHECK(max_abs_diff(matmul_tn(b, c), Matrix(3, 5)) < 1e-12);
    CHECK_THROWS_AS(orthonormal_complement(b, 6), Error);

    SUBCASE("column reordering only rotates the complement") {
        Matrix swapped = b;
        swapped.set_col(0, b.col(2));
        swapped.set_col(2, b.col(0));
        const Matrix c2 = orthonormal_complement(swapped, 5);
        // Same span: the projector c c^T is unchanged.
        CHECK(max_abs_diff(matmul_nt(c, c), matmul_nt(c2, c2)) < 1e-10);
    }
}

TEST_CASE("spd solve") {
    const Matrix g = random_matrix(6, 4, 9);
    Matrix a = matmul_tn(g, g);
    for (std::size_t i = 0; i < 4; ++i) a(i, i) += 0.1;
    const Vector x{1.0, -2.0, 0.5, 3.0};
    const Vector rhs = matvec(a, x);
    const Vector sol = solve_spd(a, rhs);
    for (std::size_t i = 0; i < 4; ++i) CHECK(sol[i] == doctest::Approx(x[i]).epsilon(1e-10));
}
