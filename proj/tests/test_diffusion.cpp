#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "ddae/container.hpp"
#include "ddae/diffusion.hpp"
#include "ddae/error.hpp"
#include "pipeline_util.hpp"
#include "test_util.hpp"

using namespace ddae;
using namespace ddae::diffusion;
using testutil::max_abs_diff;

TEST_CASE("noise schedule") {
    const auto s = NoiseSchedule::make({});
    CHECK(s.steps() == 50);
    for (std::size_t t = 1; t < s.steps(); ++t) CHECK(s.alpha_bars[t] < s.alpha_bars[t - 1]);
    CHECK(s.alpha_bars.front() < 1.0);
    CHECK(s.alpha_bars.back() > 0.0);
    CHECK(s.timestep.back() == 999);
    for (std::size_t t = 0; t < s.steps(); ++t)
        CHECK(s.alpha_bars[t] == doctest::Approx(s.alpha_bar_prev(t) * (1.0 - s.betas[t])).epsilon(1e-12));

    ScheduleConfig one;
    one.steps = 1;
    CHECK(NoiseSchedule::make(one).steps() == 1);

    ScheduleConfig bad;
    bad.steps = 7;
    CHECK_THROWS_AS(NoiseSchedule::make(bad), Error);
    bad = {};
    bad.beta_end = 1.5;
    CHECK_THROWS_AS(NoiseSchedule::make(bad), Error);
}

TEST_CASE("time embedding") {
    const Vector e = time_embedding(10);
    CHECK(e.size() == kTimeEmbedWidth);
    CHECK(std::all_of(e.begin(), e.end(), [](double v) { return std::isfinite(v) && std::abs(v) <= 1.0; }));
    CHECK(time_embedding(10) != time_embedding(11));
}

TEST_CASE("denoiser networks pass gradient checks") {
    const auto dm = make_denoiser({}, models::kEmbeddingDim, 3);
    const Matrix in = testutil::random_matrix(2, dm.net.input_width(), 4, 0.5);
    CHECK(gradient_check(dm.net, in, 1e-4, 60).passed);
    const Matrix phi = dm.features(testutil::random_matrix(2, models::kEmbeddingDim, 5, 0.3));
    CHECK(gradient_check(dm.renderer, phi, 1e-4, 60).passed);
}

TEST_CASE("sampling and inversion on a fixed model") {
    const testutil::TinyPipeline t;
    const auto& dm = t.decoder;
    const Matrix images = take_rows(t.data.images(), std::vector<std::size_t>{0, 1, 2, 3});
    const Matrix z = models::embed(t.encoder, images);
    const auto ledger = models::GradientLedger::backward_pass_count();

    const Matrix code = ddim_invert(dm, images, z);
    CHECK(code.all_finite());
    CHECK(ddim_invert(dm, images, z) == code);

    const Matrix x = ddim_sample(dm, z, code);
    CHECK(ddim_sample(dm, z, code) == x);
    CHECK(decode_counterfactual(dm, z, code) == x);

    SUBCASE("invert after sample recovers the code") {
        SeededRng rng(6);
        Matrix x_T(4, squares::kPixels);
        for (auto& v : x_T.data()) v = rng.normal();
        const Matrix img = ddim_sample(dm, z, x_T);
        // Final clamping is the only lossy step, so compare on unclamped images.
        bool clamped = false;
        for (double v : img.data()) clamped |= v <= 0.0 || v >= 1.0;
        if (!clamped) CHECK(max_abs_diff(ddim_invert(dm, img, z), x_T) < 1e-6);
    }
    SUBCASE("uniform image inverts to a finite code") {
        const Matrix flat(1, squares::kPixels, 0.5);
        Matrix z1(1, z.cols());
        z1.set_row(0, z.row(0));
        CHECK(ddim_invert(dm, flat, z1).all_finite());
    }
    CHECK(models::GradientLedger::backward_pass_count() == ledger);
}

TEST_CASE("denoiser persistence") {
    const testutil::TinyPipeline t;
    KeyValues header;
    const auto back = denoiser_from_container(Container::decode(denoiser_to_container(t.decoder, {{"x", "y"}}).encode()), &header);
    CHECK(header.at("x") == "y");
    CHECK(back.schedule.alpha_bars == t.decoder.schedule.alpha_bars);
    CHECK(back.cond_dim == t.decoder.cond_dim);
    CHECK(back.residual_scale == t.decoder.residual_scale);
    const Matrix z = models::embed(t.encoder, t.data.images());
    Matrix x_T(z.rows(), squares::kPixels, 0.1);
    CHECK(max_abs_diff(ddim_sample(back, z, x_T), ddim_sample(t.decoder, z, x_T)) < 1e-4);

    Container broken;
    broken.add_text(BlockKind::header, "role=denoiser\n");
    CHECK_THROWS_AS(denoiser_from_container(broken), Error);
}

TEST_CASE("short training run, including a single-step schedule") {
    const auto train = squares::sample_train(1000, 0.5, 7);
    models::TrainConfig ecfg;
    ecfg.learning_rate = 0.3;
    ecfg.epochs = 60;
    ecfg.seed = 1;
    const auto enc = models::train_encoder(train, ecfg);
    models::TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.epochs = 3;
    cfg.seed = 2;
    models::TrainConfig rcfg = cfg;
    rcfg.learning_rate = 2e-3;
    rcfg.epochs = 3;

    ScheduleConfig sc;
    sc.steps = 10;
    DenoiserReport rep;
    const auto dm = train_denoiser(train, enc, cfg, rcfg, sc, &rep);
    CHECK(rep.renderer_mse < rep.initial_renderer_mse);
    CHECK(rep.epoch_loss.size() == 3);
    CHECK(rep.residual_scale > 0.0);
    CHECK(dm.schedule.steps() == 10);

    ScheduleConfig single;
    single.steps = 1;
    const auto dm1 = train_denoiser(train, enc, cfg, rcfg, single);
    CHECK(dm1.schedule.steps() == 1);
    const Matrix z = models::embed(enc, train.images());
    CHECK(ddim_invert(dm1, train.images(), z).all_finite());
}
