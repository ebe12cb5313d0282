#include "doctest.h"

#include <cmath>

#include "ddae/dictionary.hpp"
#include "ddae/error.hpp"
#include "test_util.hpp"

using namespace ddae;
using namespace ddae::dictionary;
using testutil::max_abs_diff;

namespace {

// Centered N x D embeddings with Z^T Z = N I, so S = Z R is exactly standardized.
Matrix whitened_embeddings(std::size_t n, std::size_t d, std::uint64_t seed) {
    Matrix z = testutil::random_matrix(n, d, seed);
    z = center_rows(z, column_means(z));
    Matrix q = z;
    for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t p = 0; p < j; ++p) {
            double dp = 0.0;
            for (std::size_t i = 0; i < n; ++i) dp += q(i, j) * q(i, p);
            for (std::size_t i = 0; i < n; ++i) q(i, j) -= dp * q(i, p);
        }
        double nn = 0.0;
        for (std::size_t i = 0; i < n; ++i) nn += q(i, j) * q(i, j);
        for (std::size_t i = 0; i < n; ++i) q(i, j) /= std::sqrt(nn);
    }
    return q * std::sqrt(static_cast<double>(n));
}

Matrix shifted(Matrix z, const Vector& offset) {
    for (std::size_t i = 0; i < z.rows(); ++i)
        for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) += offset[j];
    return z;
}

Dictionary planted(std::size_t d, std::size_t k, std::uint64_t seed, Matrix* r_out = nullptr, Matrix* z_out = nullptr) {
    SeededRng rng(seed);
    const Matrix zc = whitened_embeddings(2000, d, seed);
    const Matrix r = testutil::random_orthonormal(d, k, seed + 1);
    const Matrix z = shifted(zc, testutil::random_vector(d, rng));
    if (r_out) *r_out = r;
    if (z_out) *z_out = z;
    return fit_procrustes(z, matmul(zc, r));
}

}  // namespace

TEST_CASE("procrustes recovers a planted rotation") {
    for (std::size_t d : {4, 8, 16})
        for (std::size_t k : {1, 2, 4}) {
            Matrix r;
            const Dictionary dict = planted(d, k, 100 * d + k, &r);
            CHECK(dict.k_semantic == k);
            for (std::size_t c = 0; c < k; ++c) {
                const Vector got = dict.omega.col(c), want = r.col(c);
                double plus = 0.0, minus = 0.0;
                for (std::size_t i = 0; i < d; ++i) {
                    plus = std::max(plus, std::abs(got[i] - want[i]));
                    minus = std::max(minus, std::abs(got[i] + want[i]));
                }
                CHECK(std::min(plus, minus) < 1e-6);
            }
            CHECK(orthonormality_defect(dict.omega) < 1e-8);
        }
}

TEST_CASE("procrustes beats random orthonormal candidates") {
    const Matrix z = testutil::random_matrix(500, 8, 3);
    const Matrix zc = center_rows(z, column_means(z));
    const Matrix s = standardize_columns(testutil::random_matrix(500, 3, 4) + matmul(zc, testutil::random_matrix(8, 3, 5)));
    const Dictionary d = fit_procrustes(z, s);
    const double best = frobenius_norm(matmul(zc, take_columns(d.omega, 0, 3)) - s);
    for (std::uint64_t trial = 0; trial < 1000; ++trial) {
        const Matrix cand = testutil::random_orthonormal(8, 3, 10000 + trial);
        CHECK(best <= frobenius_norm(matmul(zc, cand) - s) + 1e-9);
    }
}

TEST_CASE("procrustes input validation") {
    const Matrix z = testutil::random_matrix(100, 6, 1);
    Matrix s(100, 2);
    for (std::size_t i = 0; i < 100; ++i) s(i, 0) = s(i, 1) = z(i, 0);
    s = standardize_columns(s);
    try {
        fit_procrustes(z, s, {"a", "b"});
        FAIL("expected degenerate concepts");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::degenerate_concepts);
    }
    CHECK_THROWS_AS(fit_procrustes(z, testutil::random_matrix(100, 2, 2) * 5.0), Error);
}

TEST_CASE("forward and inverse maps") {
    Matrix z;
    const Dictionary d = planted(8, 3, 7, nullptr, &z);
    const Vector c0 = forward_map(d, d.centering_mean);
    for (double v : c0) CHECK(std::abs(v) < 1e-12);
    for (std::size_t k = 0; k < d.dim(); ++k) {
        Vector zk = d.centering_mean;
        const Vector col = d.omega.col(k);
        for (std::size_t i = 0; i < zk.size(); ++i) zk[i] += col[i];
        const Vector c = forward_map(d, zk);
        for (std::size_t j = 0; j < c.size(); ++j) CHECK(std::abs(c[j] - (j == k ? 1.0 : 0.0)) < 1e-10);
    }
    const Vector back = inverse_map(d, Vector(d.dim(), 0.0));
    for (std::size_t i = 0; i < back.size(); ++i) CHECK(std::abs(back[i] - d.centering_mean[i]) < 1e-12);

    const Matrix c = forward_map(d, z);
    CHECK(max_abs_diff(inverse_map(d, c), z) < 1e-10);
    for (std::size_t i = 0; i < 50; ++i) {
        Vector centered(z.row(i).begin(), z.row(i).end());
        for (std::size_t j = 0; j < centered.size(); ++j) centered[j] -= d.centering_mean[j];
        CHECK(norm(centered) == doctest::Approx(norm(c.row(i))).epsilon(1e-12));
    }
}

TEST_CASE("svd dictionary") {
    const Matrix iso = testutil::random_matrix(5000, 6, 9);
    SvdReport rep;
    const Dictionary d = fit_svd(iso, &rep);
    CHECK(rep.singular_values.front() / rep.singular_values.back() < 1.5);
    CHECK(orthonormality_defect(d.omega) < 1e-8);
    CHECK(d.method == FitMethod::svd);
    for (std::size_t k = 1; k < rep.explained_variance.size(); ++k)
        CHECK(rep.explained_variance[k] <= rep.explained_variance[k - 1]);

    Matrix rank1(200, 5);
    SeededRng rng(2);
    const Vector dir = testutil::random_vector(5, rng);
    for (std::size_t i = 0; i < 200; ++i) {
        const double t = rng.normal();
        for (std::size_t j = 0; j < 5; ++j) rank1(i, j) = t * dir[j];
    }
    SvdReport r1;
    fit_svd(rank1, &r1);
    CHECK(r1.explained_variance.front() > 0.99);
}

TEST_CASE("annotations") {
    Matrix z;
    Dictionary d = planted(6, 2, 11, nullptr, &z);
    d = annotate_components(d, {{0, "fg", ConceptRole::causal}, {1, "bg", ConceptRole::spurious}});
    CHECK(d.index_of("bg") == 1);
    CHECK(d.annotations[0]->role == ConceptRole::causal);
    d = annotate_components(d, {{0, "fg2", ConceptRole::unknown}});
    CHECK(d.annotations[0]->name == "fg2");
    CHECK_FALSE(d.find("fg").has_value());
    CHECK_THROWS_AS(annotate_components(d, {{6, "x", ConceptRole::unknown}}), Error);
    CHECK_THROWS_AS(d.index_of("missing"), Error);
    CHECK(parse_role(to_string(ConceptRole::spurious)) == ConceptRole::spurious);
}

TEST_CASE("annotations from metadata match the most correlated component") {
    const Matrix zc = whitened_embeddings(1000, 6, 12);
    const Matrix r = testutil::random_orthonormal(6, 2, 13);
    const Matrix s = matmul(zc, r);
    const Dictionary d = fit_svd(zc);
    const auto specs = annotations_from_metadata(d, zc, s, {"a", "b"}, {ConceptRole::causal, ConceptRole::spurious});
    REQUIRE(specs.size() == 2);
    CHECK(specs[0].index != specs[1].index);
    const Matrix coeff = forward_map(d, zc);
    for (const auto& sp : specs) {
        const std::size_t c = sp.name == "a" ? 0 : 1;
        const double chosen = std::abs(pearson(coeff.col(sp.index), s.col(c)));
        for (std::size_t k = 0; k < d.dim(); ++k) {
            if (k == specs[0].index || k == specs[1].index) continue;
            CHECK(chosen >= std::abs(pearson(coeff.col(k), s.col(c))) - 1e-12);
        }
    }
}

TEST_CASE("dictionary persistence") {
    Matrix z;
    Dictionary d = planted(8, 2, 14, nullptr, &z);
    d = annotate_components(d, {{1, "bg intensity", ConceptRole::spurious}});
    KeyValues header;
    const Dictionary back = dictionary_from_container(Container::decode(dictionary_to_container(d, {{"k", "v"}}).encode()), &header);
    CHECK(header.at("k") == "v");
    CHECK(back.k_semantic == 2);
    CHECK(back.annotations[1]->name == "bg intensity");
    CHECK(back.annotations[1]->role == ConceptRole::spurious);
    CHECK(orthonormality_defect(back.omega) < 1e-8);
    CHECK(max_abs_diff(back.omega, d.omega) < 1e-6);
    CHECK(max_abs_diff(inverse_map(back, forward_map(back, z)), z) < 1e-10);
}
