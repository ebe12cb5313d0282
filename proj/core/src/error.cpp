#include "ddae/error.hpp"

namespace ddae {

const char* to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::invalid_input: return "invalid-input";
        case ErrorCode::format: return "format-error";
        case ErrorCode::unsupported_version: return "unsupported-version";
        case ErrorCode::ambiguous_image: return "ambiguous-image";
        case ErrorCode::training_failure: return "training-failure";
        case ErrorCode::numerical_failure: return "numerical-failure";
        case ErrorCode::singularity: return "singularity";
        case ErrorCode::degenerate_concepts: return "degenerate-concepts";
        case ErrorCode::component_parallel: return "component-parallel-to-boundary";
        case ErrorCode::unlabeled_component: return "unlabeled-component";
        case ErrorCode::undefined_group: return "undefined-group";
        case ErrorCode::undefined_metric: return "undefined-metric";
        case ErrorCode::saturated_baseline: return "saturated-baseline";
        case ErrorCode::measurement_failure: return "measurement-failure";
        case ErrorCode::validation: return "validation-error";
    }
    return "unknown-error";
}

}  // namespace ddae
