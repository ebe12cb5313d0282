#pragma once

#include "ddae/counterfactual.hpp"
#include "ddae/dictionary.hpp"
#include "ddae/diffusion.hpp"
#include "ddae/models.hpp"
#include "ddae/squares.hpp"

namespace testutil {

// Untrained but fully wired pipeline: enough to exercise every contract that
// does not depend on learned semantics.
struct TinyPipeline {
    ddae::models::MlpModel encoder = ddae::models::make_encoder(1);
    ddae::diffusion::DenoiserModel decoder;
    ddae::dictionary::Dictionary dictionary;
    ddae::squares::DatasetSplit data = ddae::squares::sample_balanced_test(24, 5);

    TinyPipeline() {
        ddae::diffusion::ScheduleConfig sc;
        sc.steps = 8;
        decoder = ddae::diffusion::make_denoiser(sc, ddae::models::kEmbeddingDim, 2);
        dictionary = ddae::dictionary::fit_svd(ddae::models::embed(encoder, data.images()));
        dictionary = ddae::dictionary::annotate_components(
            dictionary, {{0, "first", ddae::dictionary::ConceptRole::causal},
                         {1, "second", ddae::dictionary::ConceptRole::spurious}});
    }

    ddae::counterfactual::Pipeline pipeline() const { return {&encoder, &decoder, &dictionary}; }
};

}  // namespace testutil
