#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ddae/container.hpp"

namespace ddae::metrics {

inline constexpr const char* kReportSchema = "ddae-report-v1";

// Groups are indexed g = 2y + a.
struct GroupAccuracy {
    std::array<double, 4> accuracy{};
    std::array<std::size_t, 4> count{};
    double aga = 0.0;
};

GroupAccuracy aga(std::span<const int> predictions, std::span<const int> y, std::span<const int> a);

// Binary setting: the counterfactual target is the class f did not predict.
inline int target_label(int predicted) { return 1 - predicted; }

// Fraction of records where f and the oracle both assign y_t.
double nafr(std::span<const int> f_predictions, std::span<const int> oracle_predictions, std::span<const int> y_t);
// Fraction of records where f assigns y_t.
double flip_rate(std::span<const int> f_predictions, std::span<const int> y_t);

// Percentage of the gap to perfect AGA closed by a correction.
double gain(double aga_baseline, double aga_corrected);

struct ReportRow {
    std::string name;
    std::uint64_t seed = 0;
    std::array<double, 4> group_accuracy{};
    double aga = 0.0;
    std::optional<double> nafr;
    std::optional<double> gain;
    std::optional<double> throughput;  // counterfactuals per second
};

ReportRow make_row(std::string name, std::uint64_t seed, const GroupAccuracy& acc);

struct EvaluationReport {
    std::string config_digest;
    std::string timestamp;
    KeyValues provenance;  // extra header lines, e.g. worker count or schedule
    std::vector<ReportRow> rows;

    const ReportRow* find(std::string_view name, std::uint64_t seed) const;
};

std::string format_report(const EvaluationReport& report);
EvaluationReport parse_report(std::string_view text);
void write_report(const std::filesystem::path& path, const EvaluationReport& report);
EvaluationReport read_report(const std::filesystem::path& path);
// Throws a validation error when the report was produced under another config.
void check_digest(const EvaluationReport& report, std::string_view expected);

}  // namespace ddae::metrics
