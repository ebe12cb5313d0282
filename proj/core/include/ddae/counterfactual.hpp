#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ddae/diffusion.hpp"
#include "ddae/dictionary.hpp"
#include "ddae/models.hpp"

namespace ddae::counterfactual {

enum class Method { reflection, boundary_inversion };
const char* to_string(Method m);

struct CounterfactualRecord {
    std::size_t source_index = 0;
    std::size_t component_k = 0;
    Method method = Method::reflection;
    double alpha = 0.0;  // boundary inversion only
    Vector z_prime;
    Vector image;  // 256 pixels in [0,1]
    double probe_score_before = 0.0;
    double probe_score_after = 0.0;
    int target_label = 0;  // y_t
    std::size_t variant = 0;  // 0: inverted code; > 0: seeded fresh code
};

// Negate coefficient k; every other coefficient is carried over untouched.
Vector reflect_component(const dictionary::Dictionary& d, std::span<const double> z, std::size_t k);

struct BoundaryStep {
    double alpha = 0.0;
    Vector z_prime;
    double score_before = 0.0;
    double score_after = 0.0;
};

// Closed-form step along column k that negates the (biased) probe score.
BoundaryStep invert_boundary(const dictionary::Dictionary& d, const models::LinearProbe& probe,
                             std::span<const double> z, std::size_t k);

inline constexpr double kParallelThreshold = 1e-8;

// Frozen models shared by every generation call.
struct Pipeline {
    const models::MlpModel* encoder = nullptr;
    const diffusion::DenoiserModel* decoder = nullptr;
    const dictionary::Dictionary* dictionary = nullptr;
    diffusion::InversionOptions inversion{};
};

struct Batch {
    Matrix images;                      // N x 256
    std::vector<std::size_t> indices;   // source ids, defaults to 0..N-1
    std::vector<int> source_predictions;  // f's class per image; y_t is its complement (-1 when absent)
};

struct GenerationOptions {
    // Counterfactuals per (source, component). Variant 0 decodes from the
    // inverted code; later variants use fresh codes seeded by (seed, source, j).
    std::size_t variants = 1;
    std::uint64_t seed = 0;
};

struct GenerationResult {
    std::vector<CounterfactualRecord> records;
    Matrix reconstructions;  // decode(z, x_T) per source
    Matrix codes;            // x_T per source
    std::vector<std::string> notes;  // skipped or failed (sample, component) pairs
    std::size_t inversions = 0;       // images pushed through ddim_invert
    std::size_t decodes = 0;          // images pushed through the sampler
    std::uint64_t backward_passes = 0;  // ledger delta over the call
};

// Reflection counterfactuals over a batch: one embedding and inversion per source, then one
// decode per requested component.
// The probe, when given, only supplies before/after scores.
GenerationResult generate_reflections(const Pipeline& p, const Batch& batch, const std::vector<std::size_t>& components,
                                      const GenerationOptions& options = {},
                                      const models::LinearProbe* probe = nullptr);

// Boundary-inversion counterfactuals over a batch. Components parallel to the probe boundary are
// skipped with a note.
GenerationResult generate_inversions(const Pipeline& p, const models::LinearProbe& probe, const Batch& batch,
                                     const std::vector<std::size_t>& components, const GenerationOptions& options = {});

// Components of interest when none are given: all annotated ones.
std::vector<std::size_t> default_components(const dictionary::Dictionary& d);

// ---- throughput ----------------------------------------------------------------

enum class InversionSharing { shared, per_counterfactual };

struct ThroughputReport {
    double counterfactuals_per_second = 0.0;
    std::vector<double> batch_rates;  // timed batches only
    double embed_seconds = 0.0;       // summed over timed batches
    double invert_seconds = 0.0;
    double decode_seconds = 0.0;
    std::size_t batch_size = 0;
    std::size_t components = 0;
    std::size_t workers = 1;
    InversionSharing sharing = InversionSharing::shared;
    std::vector<std::string> notes;
};

// One discarded warm-up batch, then `repeats` timed batches of reflections
// drawn round-robin from `pool`. Rate = counterfactuals / elapsed seconds.
ThroughputReport measure_throughput(const Pipeline& p, const Matrix& pool, std::size_t batch_size,
                                    const std::vector<std::size_t>& components, InversionSharing sharing,
                                    std::size_t repeats = 3);

// ---- export --------------------------------------------------------------------

std::string format_pgm(std::span<const double> image);
void write_pgm(const std::filesystem::path& path, std::span<const double> image);

// CSV manifest plus one graymap per record under `dir`. Returns the manifest path.
std::filesystem::path export_records(const std::filesystem::path& dir, const std::vector<CounterfactualRecord>& records);

}  // namespace ddae::counterfactual
