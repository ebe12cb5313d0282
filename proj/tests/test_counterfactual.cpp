#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "ddae/container.hpp"
#include "ddae/counterfactual.hpp"
#include "ddae/error.hpp"
#include "pipeline_util.hpp"
#include "test_util.hpp"

using namespace ddae;
using namespace ddae::counterfactual;
using testutil::TinyPipeline;

namespace {

dictionary::Dictionary random_dictionary(std::size_t d, std::uint64_t seed) {
    dictionary::Dictionary dict;
    dict.omega = testutil::random_orthonormal(d, d, seed);
    SeededRng rng(seed + 1);
    dict.centering_mean = testutil::random_vector(d, rng);
    dict.annotations.assign(d, std::nullopt);
    return dict;
}

}  // namespace

TEST_CASE("reflection closed forms") {
    const auto d = random_dictionary(8, 1);
    SeededRng rng(2);
    double worst_involution = 0.0, worst_other = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const Vector z = testutil::random_vector(8, rng, 2.0);
        const std::size_t k = rng.below(8);
        const Vector z1 = reflect_component(d, z, k);
        const Vector z2 = reflect_component(d, z1, k);
        for (std::size_t i = 0; i < 8; ++i) worst_involution = std::max(worst_involution, std::abs(z2[i] - z[i]));
        const Vector c = dictionary::forward_map(d, z), c1 = dictionary::forward_map(d, z1);
        for (std::size_t j = 0; j < 8; ++j)
            worst_other = std::max(worst_other, std::abs(c1[j] - (j == k ? -c[j] : c[j])));
        Vector a(z), b(z1);
        for (std::size_t i = 0; i < 8; ++i) a[i] -= d.centering_mean[i], b[i] -= d.centering_mean[i];
        CHECK(norm(a) == doctest::Approx(norm(b)).epsilon(1e-12));
    }
    CHECK(worst_involution < 1e-10);
    CHECK(worst_other < 1e-10);

    SUBCASE("fixed hyperplane and planted coefficient") {
        const Vector col = d.omega.col(3);
        Vector on_plane = d.centering_mean, plus2 = d.centering_mean;
        for (std::size_t i = 0; i < 8; ++i) on_plane[i] += d.omega(i, 0), plus2[i] += 2.0 * col[i];
        const Vector same = reflect_component(d, on_plane, 3);
        for (std::size_t i = 0; i < 8; ++i) CHECK(std::abs(same[i] - on_plane[i]) < 1e-12);
        const Vector minus2 = reflect_component(d, plus2, 3);
        for (std::size_t i = 0; i < 8; ++i) CHECK(std::abs(minus2[i] - (d.centering_mean[i] - 2.0 * col[i])) < 1e-12);
    }
    CHECK_THROWS_AS(reflect_component(d, Vector(8, 0.0), 8), Error);
}

TEST_CASE("boundary inversion negates the probe score") {
    const auto d = random_dictionary(16, 3);
    SeededRng rng(4);
    double worst = 0.0;
    std::size_t checked = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        models::LinearProbe p{testutil::random_vector(16, rng), rng.normal()};
        const Vector z = testutil::random_vector(16, rng, 2.0);
        const std::size_t k = rng.below(16);
        if (std::abs(dot(p.w, d.omega.col(k))) < 1e-3) continue;
        const auto step = invert_boundary(d, p, z, k);
        const double before = p.score(z), after = p.score(step.z_prime);
        worst = std::max(worst, std::abs(after + before));
        CHECK(step.score_before == doctest::Approx(before));
        ++checked;
    }
    CHECK(checked > 9900);
    CHECK(worst < 1e-9);

    SUBCASE("direction orthogonal to the probe is rejected") {
        models::LinearProbe p{d.omega.col(0), 0.3};
        try {
            invert_boundary(d, p, Vector(16, 0.0), 1);
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::component_parallel);
        }
    }
}

TEST_CASE("generation shares one inversion and never runs backward passes") {
    const TinyPipeline t;
    const auto p = t.pipeline();
    Batch batch;
    batch.images = take_rows(t.data.images(), std::vector<std::size_t>{0, 1, 2});
    batch.source_predictions = {0, 1, 1};

    const auto ledger = models::GradientLedger::backward_pass_count();
    const auto res = generate_reflections(p, batch, {0, 1, 2, 3});
    CHECK(res.records.size() == 12);
    CHECK(res.inversions == 3);
    CHECK(res.decodes == 3 + 12);
    CHECK(res.backward_passes == 0);
    CHECK(res.codes.rows() == 3);
    CHECK(res.records[0].target_label == 1);
    CHECK(res.records[4].target_label == 0);

    models::LinearProbe probe{t.dictionary.omega.col(0), 0.1};
    const auto inv = generate_inversions(p, probe, batch, {0, 1});
    CHECK(inv.backward_passes == 0);
    for (const auto& r : inv.records) CHECK(std::abs(r.probe_score_after + r.probe_score_before) < 1e-9);
    CHECK(models::GradientLedger::backward_pass_count() == ledger);

    SUBCASE("empty component list still reconstructs") {
        const auto e = generate_reflections(p, batch, {});
        CHECK(e.records.empty());
        CHECK(e.reconstructions.rows() == 3);
    }
    SUBCASE("all-parallel components are skipped with notes") {
        const auto skip = generate_inversions(p, probe, batch, {1, 2});
        CHECK(skip.records.empty());
        CHECK(skip.notes.size() == 2);
    }
    SUBCASE("variants use fresh codes and are reproducible") {
        GenerationOptions opts;
        opts.variants = 3;
        opts.seed = 9;
        const auto a = generate_reflections(p, batch, {0}, opts);
        const auto b = generate_reflections(p, batch, {0}, opts);
        REQUIRE(a.records.size() == 9);
        for (std::size_t i = 0; i < a.records.size(); ++i) CHECK(a.records[i].image == b.records[i].image);
        // variant-major within a component: records[3] is source 0, variant 1
        CHECK(a.records[0].variant == 0);
        CHECK(a.records[3].variant == 1);
        CHECK(a.records[3].source_index == a.records[0].source_index);
        CHECK(a.records[0].image != a.records[3].image);
        CHECK(a.records[0].z_prime == a.records[3].z_prime);
    }
    SUBCASE("default components are the annotated ones") {
        CHECK(default_components(t.dictionary) == std::vector<std::size_t>{0, 1});
    }
}

TEST_CASE("throughput measurement") {
    const TinyPipeline t;
    const auto rep = measure_throughput(t.pipeline(), t.data.images(), 4, {0, 1}, InversionSharing::shared, 3);
    CHECK(rep.counterfactuals_per_second > 0.0);
    CHECK(rep.batch_rates.size() == 3);
    CHECK(rep.invert_seconds > 0.0);
    CHECK(rep.decode_seconds > 0.0);
    CHECK_THROWS_AS(measure_throughput(t.pipeline(), t.data.images(), 0, {0}, InversionSharing::shared), Error);
}

TEST_CASE("graymap export") {
    Vector img(squares::kPixels, 0.0);
    img[0] = 1.0;
    img[1] = 0.5;
    img[2] = 2.0;
    const std::string pgm = format_pgm(img);
    CHECK(pgm.substr(0, 13) == "P5\n16 16\n255\n");
    CHECK(pgm.size() == 13 + squares::kPixels);
    CHECK(static_cast<unsigned char>(pgm[13]) == 255);
    CHECK(static_cast<unsigned char>(pgm[14]) == 128);
    CHECK(static_cast<unsigned char>(pgm[15]) == 255);

    CounterfactualRecord r;
    r.source_index = 4;
    r.component_k = 2;
    r.image = img;
    r.target_label = 1;
    const auto dir = std::filesystem::temp_directory_path() / "ddae_export_test";
    std::filesystem::remove_all(dir);
    const auto manifest = export_records(dir, {r});
    const std::string text = read_file(manifest);
    CHECK(text.rfind("source_index,k,method,variant,alpha,score_before,score_after,y_t,image\n", 0) == 0);
    CHECK(text.find("images/cf_4_k2_v0_ref.pgm") != std::string::npos);
    CHECK(read_file(dir / "images" / "cf_4_k2_v0_ref.pgm") == pgm);
    std::filesystem::remove_all(dir);
}
