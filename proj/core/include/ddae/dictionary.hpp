#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ddae/container.hpp"
#include "ddae/numerics.hpp"

namespace ddae::dictionary {

// What a component means for the class label. `spurious` covers every
// label-preserving factor: editing it must not change the class.
enum class ConceptRole { unknown, causal, spurious };

const char* to_string(ConceptRole role);
ConceptRole parse_role(std::string_view text);

struct ComponentAnnotation {
    std::string name;
    ConceptRole role = ConceptRole::unknown;
};

enum class FitMethod { procrustes, svd };

// Orthogonal D x D basis of the embedding space. Column k is the direction of
// component k; coefficients are projections of the centered embedding onto
// the columns.
struct Dictionary {
    Matrix omega;
    std::size_t k_semantic = 0;
    std::vector<std::optional<ComponentAnnotation>> annotations;  // one slot per column
    Vector centering_mean;
    FitMethod method = FitMethod::svd;

    std::size_t dim() const { return omega.cols(); }
    Vector direction(std::size_t k) const;
    std::optional<std::size_t> find(std::string_view name) const;
    // Index of the named component; throws invalid-input if absent.
    std::size_t index_of(std::string_view name) const;
};

struct ProcrustesReport {
    Vector singular_values;        // of the cross-covariance
    Vector alignment_correlation;  // corr(Z_c * omega_k, s_k) per concept
};

struct SvdReport {
    Vector singular_values;
    Vector explained_variance;  // fraction of total variance per component
};

// Columns rescaled to zero mean and unit (population) variance.
Matrix standardize_columns(const Matrix& s);

// Supervised alignment. s must be column-standardized (N x K, K <= D < N).
// Concept names default to "concept_<k>"; annotations carry role unknown.
Dictionary fit_procrustes(const Matrix& z, const Matrix& s, const std::vector<std::string>& concept_names = {},
                          ProcrustesReport* report = nullptr);

// Unsupervised: right singular vectors of the centered embeddings.
Dictionary fit_svd(const Matrix& z, SvdReport* report = nullptr);

Vector forward_map(const Dictionary& d, std::span<const double> z);
Vector inverse_map(const Dictionary& d, std::span<const double> c);
// Row-wise batch versions.
Matrix forward_map(const Dictionary& d, const Matrix& z);
Matrix inverse_map(const Dictionary& d, const Matrix& c);

struct AnnotationSpec {
    std::size_t index = 0;
    std::string name;
    ConceptRole role = ConceptRole::unknown;
};

// Overwrites the given slots; other annotations are kept.
Dictionary annotate_components(Dictionary d, const std::vector<AnnotationSpec>& specs);

// Annotation from metadata: for each concept column of s, the component with
// the largest |correlation| on (z, s) gets that concept's name and role.
std::vector<AnnotationSpec> annotations_from_metadata(const Dictionary& d, const Matrix& z, const Matrix& s,
                                                      const std::vector<std::string>& names,
                                                      const std::vector<ConceptRole>& roles);

double pearson(std::span<const double> a, std::span<const double> b);

Container dictionary_to_container(const Dictionary& d, const KeyValues& extra = {});
Dictionary dictionary_from_container(const Container& c, KeyValues* header = nullptr);
void save_dictionary(const std::filesystem::path& path, const Dictionary& d, const KeyValues& extra = {});
Dictionary load_dictionary(const std::filesystem::path& path, KeyValues* header = nullptr);

}  // namespace ddae::dictionary
