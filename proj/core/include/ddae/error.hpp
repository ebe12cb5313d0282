#pragma once

#include <stdexcept>
#include <string>

namespace ddae {

enum class ErrorCode {
    invalid_input,
    format,
    unsupported_version,
    ambiguous_image,
    training_failure,
    numerical_failure,
    singularity,
    degenerate_concepts,
    component_parallel,
    unlabeled_component,
    undefined_group,
    undefined_metric,
    saturated_baseline,
    measurement_failure,
    validation,
};

const char* to_string(ErrorCode code);

// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool ok, const std::string& what) {
    if (!ok) fail(ErrorCode::invalid_input, what);
}

}  // namespace ddae
