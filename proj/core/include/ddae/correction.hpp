#pragma once

#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "ddae/counterfactual.hpp"
#include "ddae/dictionary.hpp"
#include "ddae/metrics.hpp"
#include "ddae/models.hpp"
#include "ddae/squares.hpp"

namespace ddae::correction {

// ---- concept map -------------------------------------------------------------------

struct ConceptEntry {
    std::string name;
    dictionary::ConceptRole role = dictionary::ConceptRole::unknown;
    // Causal components: label assigned when the coefficient (taken relative to
    // the dictionary's centering mean) is positive; the other class otherwise.
    int positive_label = 1;
};

struct ConceptMap {
    std::vector<ConceptEntry> entries;  // one per dictionary component

    std::size_t size() const { return entries.size(); }
    const ConceptEntry& at(std::size_t k) const;
};

ConceptMap concept_map_from_dictionary(const dictionary::Dictionary& d);

// Sets positive_label of every causal component to the majority label among
// samples whose coefficient is positive.
void calibrate_flip_rules(ConceptMap& map, const dictionary::Dictionary& d, const Matrix& z, std::span<const int> labels);

// ---- projection ----------------------------------------------------------------------

// z - (z . d) d with d normalized internally. Directions whose norm is off by
// more than 1e-6 produce a warning.
Vector project_embedding(std::span<const double> z, std::span<const double> d_spur, std::string* warning = nullptr);
Matrix project_embeddings(const Matrix& z, std::span<const double> d_spur, std::string* warning = nullptr);

inline constexpr double kDefaultProbeRidge = 1e-3;

// Ridge probe on +-1 class targets.
models::LinearProbe fit_label_probe(const Matrix& z, std::span<const int> labels, double ridge,
                                    std::span<const double> weights = {});
metrics::GroupAccuracy probe_group_accuracy(const models::LinearProbe& probe, const Matrix& z,
                                            const squares::DatasetSplit& split);

// Rows "probe-original" (unprojected baseline) and "probe-projected".
metrics::EvaluationReport projected_probe_pipeline(const models::MlpModel& encoder, std::span<const double> d_spur,
                                                   const squares::DatasetSplit& train,
                                                   const squares::DatasetSplit& test, std::uint64_t seed,
                                                   double ridge = kDefaultProbeRidge);

// ---- teacher ---------------------------------------------------------------------------

// Labels counterfactuals per component cluster: spurious edits keep the source
// label, causal edits take the label implied by the post-edit coefficient sign.
// One decision per distinct component; records never reach an oracle.
class PreclusteredTeacher {
public:
    PreclusteredTeacher(const ConceptMap& map, const dictionary::Dictionary& d);

    int label(const counterfactual::CounterfactualRecord& record, int source_label);
    // Distinct components that have been labeled so far.
    std::size_t labeled_clusters() const { return clusters_.size(); }
    const std::set<std::size_t>& clusters() const { return clusters_; }

private:
    const ConceptMap* map_;
    const dictionary::Dictionary* dict_;
    std::set<std::size_t> clusters_;
};

int preclustered_teacher_label(const counterfactual::CounterfactualRecord& record, int source_label,
                               const ConceptMap& map, const dictionary::Dictionary& d);

// ---- CFKD ----------------------------------------------------------------------------------

struct CfkdConfig {
    std::size_t rounds = 3;
    std::size_t variants = 2;  // K counterfactuals per component per sample
    std::vector<std::size_t> components;
    double augmentation_weight = 1.0;
    std::size_t subsample = 500;  // train sources per round
    bool warm_start = true;
    models::TrainConfig retrain;
    std::uint64_t seed = 0;
};

// Every listed component must be annotated causal or spurious.
void validate(const CfkdConfig& cfg, const ConceptMap& map);

struct RoundLog {
    std::size_t round = 0;  // 0 is the baseline
    std::size_t real_pool = 0;
    std::size_t counterfactual_pool = 0;
    std::size_t generated = 0;
    std::size_t labeled = 0;
    metrics::GroupAccuracy accuracy;
    std::optional<double> gain;
    std::vector<std::string> notes;
};

std::string format_round_log(const std::vector<RoundLog>& rounds);

struct CfkdResult {
    models::MlpModel student;
    std::vector<RoundLog> rounds;
    metrics::EvaluationReport report;  // one row per round, named "cfkd-round-<r>"
    std::size_t labeled_clusters = 0;
    bool completed = true;
    std::string abort_reason;
};

CfkdResult cfkd_run(const models::MlpModel& student, const counterfactual::Pipeline& pipeline, const ConceptMap& map,
                    const squares::DatasetSplit& train, const squares::DatasetSplit& test, const CfkdConfig& cfg);

enum class InjectionMode { embedding, pixel };
const char* to_string(InjectionMode mode);
InjectionMode parse_injection_mode(std::string_view text);

struct ProbeCfkdResult {
    models::LinearProbe probe;
    std::vector<RoundLog> rounds;
    metrics::EvaluationReport report;  // rows "probe-cfkd-<mode>-round-<r>"
    InjectionMode mode = InjectionMode::pixel;
    std::size_t labeled_clusters = 0;
    bool completed = true;
    std::string abort_reason;
};

// Same loop with a linear probe on frozen embeddings as the student. Embedding
// mode feeds edited embeddings straight to the probe (one per sample and
// component); pixel mode decodes K variants and re-embeds them.
ProbeCfkdResult foundation_probe_cfkd(const counterfactual::Pipeline& pipeline, const ConceptMap& map,
                                      const squares::DatasetSplit& train, const squares::DatasetSplit& test,
                                      const CfkdConfig& cfg, InjectionMode mode, double ridge = kDefaultProbeRidge);

}  // namespace ddae::correction
