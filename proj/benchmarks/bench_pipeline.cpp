#include <benchmark/benchmark.h>

#include "ddae/counterfactual.hpp"
#include "ddae/dictionary.hpp"
#include "ddae/diffusion.hpp"
#include "ddae/models.hpp"
#include "ddae/numerics.hpp"
#include "ddae/rng.hpp"
#include "ddae/squares.hpp"

using namespace ddae;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    SeededRng rng(seed);
    Matrix m(r, c);
    for (auto& v : m.data()) v = rng.normal();
    return m;
}

// Untrained models with the production shapes; timing does not depend on the weights.
struct Fixture {
    models::MlpModel encoder = models::make_encoder(1);
    diffusion::DenoiserModel decoder = diffusion::make_denoiser({}, models::kEmbeddingDim, 2);
    squares::DatasetSplit data = squares::sample_balanced_test(64, 3);
    dictionary::Dictionary dict = dictionary::fit_svd(models::embed(encoder, data.images()));

    counterfactual::Pipeline pipeline() const { return {&encoder, &decoder, &dict}; }
};

const Fixture& fixture() {
    static const Fixture f;
    return f;
}

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix a = random_matrix(n, 256, 1), b = random_matrix(256, 256, 2);
    for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(128);

void BM_Svd(benchmark::State& state) {
    const Matrix a = random_matrix(2000, 16, 3);
    for (auto _ : state) benchmark::DoNotOptimize(svd(a));
}
BENCHMARK(BM_Svd);

void BM_Embed(benchmark::State& state) {
    const auto& f = fixture();
    for (auto _ : state) benchmark::DoNotOptimize(models::embed(f.encoder, f.data.images()));
}
BENCHMARK(BM_Embed);

void BM_DdimSample(benchmark::State& state) {
    const auto& f = fixture();
    const Matrix z = models::embed(f.encoder, take_rows(f.data.images(), std::vector<std::size_t>{0, 1, 2, 3}));
    const Matrix x_T = random_matrix(4, squares::kPixels, 4);
    for (auto _ : state) benchmark::DoNotOptimize(diffusion::ddim_sample(f.decoder, z, x_T));
}
BENCHMARK(BM_DdimSample)->Unit(benchmark::kMillisecond);

void BM_DdimInvert(benchmark::State& state) {
    const auto& f = fixture();
    const Matrix x = take_rows(f.data.images(), std::vector<std::size_t>{0, 1, 2, 3});
    const Matrix z = models::embed(f.encoder, x);
    for (auto _ : state) benchmark::DoNotOptimize(diffusion::ddim_invert(f.decoder, x, z));
}
BENCHMARK(BM_DdimInvert)->Unit(benchmark::kMillisecond);

// Four components per source: shared inversion versus one inversion per counterfactual.
void BM_Reflections(benchmark::State& state) {
    const auto& f = fixture();
    const auto sharing = state.range(0) == 0 ? counterfactual::InversionSharing::shared
                                             : counterfactual::InversionSharing::per_counterfactual;
    double rate = 0.0;
    for (auto _ : state) {
        const auto rep = counterfactual::measure_throughput(f.pipeline(), f.data.images(), 4, {0, 1, 2, 3}, sharing, 1);
        rate = rep.counterfactuals_per_second;
    }
    state.counters["counterfactuals_per_second"] = rate;
    state.SetLabel(state.range(0) == 0 ? "shared" : "per_counterfactual");
}
BENCHMARK(BM_Reflections)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->Iterations(2);

}  // namespace

BENCHMARK_MAIN();
