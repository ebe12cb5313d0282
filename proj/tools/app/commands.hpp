#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "app/config.hpp"
#include "ddae/error.hpp"

namespace ddae::app {

// 0 success, 2 validation, 3 training failure, 4 numerical failure.
int exit_code(ErrorCode code);

// Artifact locations under the output directory.
struct Layout {
    std::filesystem::path root;

    explicit Layout(std::filesystem::path r) : root(std::move(r)) {}
    std::filesystem::path foundation() const { return root / "data" / "foundation.ddae"; }
    std::filesystem::path train_split(std::uint64_t seed) const;
    std::filesystem::path test_split(std::uint64_t seed) const;
    std::filesystem::path encoder() const { return root / "encoder" / "encoder.ddae"; }
    std::filesystem::path decoder() const { return root / "decoder" / "decoder.ddae"; }
    std::filesystem::path dictionary() const { return root / "dictionary" / "dictionary.ddae"; }
    std::filesystem::path student(std::uint64_t seed) const;
    std::filesystem::path oracle(std::uint64_t seed) const;
    std::filesystem::path explain_dir(const std::string& algo) const { return root / "explain" / algo; }
    std::filesystem::path correct_dir(const std::string& name, std::uint64_t seed) const;
    std::filesystem::path eval_report() const { return root / "eval" / "report.csv"; }
    std::filesystem::path bench_report() const { return root / "bench" / "throughput.csv"; }
};

enum class ExplainAlgo { reflect, invert };
ExplainAlgo parse_explain_algo(const std::string& text);

enum class Strategy { project, cfkd };
enum class Target { student, probe };
Strategy parse_strategy(const std::string& text);
Target parse_target(const std::string& text);

struct ExplainSummary {
    std::size_t records = 0;
    std::uint64_t backward_passes = 0;
    std::vector<std::string> notes;
};

struct BenchSummary {
    double shared_rate = 0.0;
    double per_counterfactual_rate = 0.0;
    double speedup = 0.0;
};

// Each command reads its inputs from cfg.output_dir(), refuses missing or
// stale artifacts, writes its outputs plus the resolved config, and throws
// ddae::Error on failure.
void cmd_gen_data(const RunConfig& cfg, std::ostream& log);
void cmd_train_encoder(const RunConfig& cfg, std::ostream& log);
void cmd_train_decoder(const RunConfig& cfg, std::ostream& log);
void cmd_train_student(const RunConfig& cfg, std::ostream& log);
void cmd_fit_dict(const RunConfig& cfg, std::ostream& log);
ExplainSummary cmd_explain(const RunConfig& cfg, ExplainAlgo algo, std::ostream& log);
void cmd_correct(const RunConfig& cfg, Strategy strategy, Target target, std::ostream& log);
void cmd_eval(const RunConfig& cfg, std::ostream& log);
BenchSummary cmd_bench(const RunConfig& cfg, std::ostream& log);
void cmd_run_all(const RunConfig& cfg, std::ostream& log);

// Report timestamp: SOURCE_DATE_EPOCH when set, else the current UTC time.
std::string report_timestamp();

}  // namespace ddae::app
