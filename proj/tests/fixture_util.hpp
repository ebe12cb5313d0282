#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "app/commands.hpp"
#include "app/config.hpp"

namespace testutil {

// Trained pipeline built from the shipped default config under the build tree.
inline ddae::app::RunConfig fixture_config() {
    auto cfg = ddae::app::RunConfig::load(DDAE_DEFAULT_CONFIG);
    cfg.set("output_dir", DDAE_FIXTURE_DIR);
    return cfg;
}

inline std::string read_text(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// The fixture is current when its last stage exists and the eval report was
// produced from the same resolved config.
inline bool fixture_current(const ddae::app::RunConfig& cfg) {
    const ddae::app::Layout lay(cfg.output_dir());
    if (!std::filesystem::exists(lay.bench_report()) || !std::filesystem::exists(lay.root / "timings.csv"))
        return false;
    return read_text(lay.eval_report()).find("# config_digest=" + ddae::app::config_digest(cfg) + "\n") !=
           std::string::npos;
}

// Rows of a small CSV file keyed by header name; '#' lines are skipped.
inline std::vector<std::map<std::string, std::string>> read_csv(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::string line;
    std::vector<std::string> header;
    std::vector<std::map<std::string, std::string>> rows;
    const auto split = [](const std::string& s) {
        std::vector<std::string> out;
        std::stringstream ss(s);
        std::string cell;
        while (std::getline(ss, cell, ',')) out.push_back(cell);
        if (!s.empty() && s.back() == ',') out.emplace_back();
        return out;
    };
    while (std::getline(in, line)) {
        if (line.empty() || line.front() == '#') continue;
        if (header.empty()) {
            header = split(line);
            continue;
        }
        const auto cells = split(line);
        std::map<std::string, std::string> row;
        for (std::size_t i = 0; i < header.size() && i < cells.size(); ++i) row[header[i]] = cells[i];
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace testutil
