#include "doctest.h"

#include <cmath>

#include "ddae/correction.hpp"
#include "ddae/error.hpp"
#include "pipeline_util.hpp"
#include "test_util.hpp"

using namespace ddae;
using namespace ddae::correction;
using dictionary::ConceptRole;
using testutil::TinyPipeline;

TEST_CASE("projection examples") {
    const Vector z = project_embedding(Vector{3.0, 2.0}, Vector{1.0, 0.0});
    CHECK(z[0] == 0.0);
    CHECK(z[1] == 2.0);
    const Vector perp = project_embedding(Vector{0.0, 5.0}, Vector{1.0, 0.0});
    CHECK(perp == Vector{0.0, 5.0});
    CHECK_THROWS_AS(project_embedding(Vector{1.0, 1.0}, Vector{0.0, 0.0}), Error);

    std::string warning;
    project_embedding(Vector{1.0, 1.0}, Vector{2.0, 0.0}, &warning);
    CHECK_FALSE(warning.empty());
    project_embedding(Vector{1.0, 1.0}, Vector{1.0, 0.0}, &warning);
    CHECK(warning.empty());
}

TEST_CASE("projection is idempotent, orthogonal and a contraction") {
    SeededRng rng(5);
    double worst_idem = 0.0, worst_orth = 0.0;
    for (int trial = 0; trial < 10000; ++trial) {
        const Vector z = testutil::random_vector(16, rng, 3.0);
        Vector d = testutil::random_vector(16, rng);
        const double n = norm(d);
        for (double& v : d) v /= n;
        const Vector p = project_embedding(z, d);
        const Vector pp = project_embedding(p, d);
        for (std::size_t i = 0; i < 16; ++i) worst_idem = std::max(worst_idem, std::abs(pp[i] - p[i]));
        worst_orth = std::max(worst_orth, std::abs(dot(p, d)));
        CHECK(norm(p) <= norm(z) + 1e-12);
    }
    CHECK(worst_idem < 1e-12);
    CHECK(worst_orth < 1e-12);

    const Matrix zs = testutil::random_matrix(5, 3, 6);
    const Matrix ps = project_embeddings(zs, Vector{0.0, 0.0, 1.0});
    for (std::size_t i = 0; i < 5; ++i) CHECK(ps(i, 2) == doctest::Approx(0.0));
}

TEST_CASE("label probe and group accuracy") {
    const auto test = squares::sample_balanced_test(40, 3);
    Matrix z(40, 2);
    for (std::size_t i = 0; i < 40; ++i) {
        z(i, 0) = test.samples[i].y ? 1.0 : -1.0;
        z(i, 1) = test.samples[i].a ? 1.0 : -1.0;
    }
    const auto p = fit_label_probe(z, test.labels(), 1e-6);
    CHECK(p.w[0] == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(std::abs(p.w[1]) < 1e-4);
    CHECK(probe_group_accuracy(p, z, test).aga == 1.0);
}

TEST_CASE("preclustered teacher") {
    dictionary::Dictionary d;
    d.omega = Matrix::identity(3);
    d.centering_mean = Vector(3, 0.0);
    d.annotations = {dictionary::ComponentAnnotation{"fg", ConceptRole::causal},
                     dictionary::ComponentAnnotation{"bg", ConceptRole::spurious}, std::nullopt};
    ConceptMap map = concept_map_from_dictionary(d);
    CHECK(map.at(0).role == ConceptRole::causal);
    CHECK(map.at(2).role == ConceptRole::unknown);

    counterfactual::CounterfactualRecord spur;
    spur.component_k = 1;
    spur.z_prime = {1.0, -1.0, 0.0};
    CHECK(preclustered_teacher_label(spur, 1, map, d) == 1);
    CHECK(preclustered_teacher_label(spur, 0, map, d) == 0);

    counterfactual::CounterfactualRecord causal;
    causal.component_k = 0;
    causal.z_prime = {-0.7, 0.0, 0.0};  // reflected from a positive fg coefficient
    CHECK(preclustered_teacher_label(causal, 1, map, d) == 0);
    causal.z_prime[0] = 0.7;
    CHECK(preclustered_teacher_label(causal, 0, map, d) == 1);

    map.entries[0].positive_label = 0;
    CHECK(preclustered_teacher_label(causal, 0, map, d) == 0);

    counterfactual::CounterfactualRecord unknown;
    unknown.component_k = 2;
    unknown.z_prime = {0.0, 0.0, 1.0};
    try {
        preclustered_teacher_label(unknown, 1, map, d);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::unlabeled_component);
    }

    SUBCASE("labeling cost scales with components, not records") {
        PreclusteredTeacher teacher(map, d);
        for (int i = 0; i < 50; ++i) {
            teacher.label(spur, i % 2);
            teacher.label(causal, i % 2);
        }
        CHECK(teacher.labeled_clusters() == 2);
    }
    SUBCASE("flip rule calibration") {
        const Matrix z = Matrix::from_rows({{1.0, 0, 0}, {2.0, 0, 0}, {-1.0, 0, 0}});
        ConceptMap m = concept_map_from_dictionary(d);
        calibrate_flip_rules(m, d, z, std::vector<int>{0, 0, 1});
        CHECK(m.at(0).positive_label == 0);
        calibrate_flip_rules(m, d, z, std::vector<int>{1, 1, 0});
        CHECK(m.at(0).positive_label == 1);
    }
}

TEST_CASE("cfkd configuration and bookkeeping") {
    const TinyPipeline t;
    const ConceptMap map = concept_map_from_dictionary(t.dictionary);
    CfkdConfig cfg;
    cfg.components = {0, 1};
    CHECK_NOTHROW(validate(cfg, map));
    cfg.components = {2};
    CHECK_THROWS_AS(validate(cfg, map), Error);
    cfg.components = {};
    CHECK_THROWS_AS(validate(cfg, map), Error);
    cfg.components = {0};
    cfg.variants = 0;
    CHECK_THROWS_AS(validate(cfg, map), Error);

    CHECK(parse_injection_mode("pixel") == InjectionMode::pixel);
    CHECK(std::string(to_string(InjectionMode::embedding)) == "embedding");
    CHECK_THROWS_AS(parse_injection_mode("latent"), Error);

    RoundLog r;
    r.round = 1;
    r.real_pool = 10;
    const std::string log = format_round_log({r});
    CHECK(log.rfind("round,real_pool,counterfactual_pool,generated,labeled,", 0) == 0);
    CHECK(log.find("\n1,10,") != std::string::npos);
}

TEST_CASE("cfkd rounds leave the frozen models alone") {
    TinyPipeline t;
    const auto train = squares::sample_train(100, 0.98, 7);
    const auto test = squares::sample_balanced_test(20, 8);
    ConceptMap map = concept_map_from_dictionary(t.dictionary);
    const auto f = models::make_student(3);
    CfkdConfig cfg;
    cfg.components = {0, 1};
    cfg.subsample = 10;
    cfg.variants = 1;
    cfg.retrain.epochs = 2;
    cfg.retrain.learning_rate = 0.02;

    SUBCASE("zero rounds return the baseline") {
        cfg.rounds = 0;
        const auto res = cfkd_run(f, t.pipeline(), map, train, test, cfg);
        CHECK(res.student.checksum() == f.checksum());
        REQUIRE(res.rounds.size() == 1);
        CHECK(res.report.rows.size() == 1);
    }
    SUBCASE("one round") {
        const auto enc = t.encoder.checksum();
        const auto dec = t.decoder.net.checksum();
        cfg.rounds = 1;
        const auto res = cfkd_run(f, t.pipeline(), map, train, test, cfg);
        CHECK(res.completed);
        CHECK(res.rounds.size() == 2);
        CHECK(res.rounds[1].generated == 20);
        CHECK(res.labeled_clusters == 2);
        CHECK(t.encoder.checksum() == enc);
        CHECK(t.decoder.net.checksum() == dec);
        CHECK(res.student.checksum() != f.checksum());
    }
}
