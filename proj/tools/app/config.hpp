#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ddae/container.hpp"
#include "ddae/diffusion.hpp"
#include "ddae/models.hpp"

namespace ddae::app {

enum class ValueType { integer, real, text, flag, list, seeds };

struct ConfigKey {
    const char* name;
    const char* default_value;
    ValueType type;
};

// Every accepted key with its default; anything else is rejected.
const std::vector<ConfigKey>& config_schema();

// Plain key=value run configuration, always fully resolved against the schema.
class RunConfig {
public:
    static RunConfig defaults();
    // Overlays `text` on the defaults; unknown keys and malformed values are
    // validation errors.
    static RunConfig parse(std::string_view text);
    static RunConfig load(const std::filesystem::path& path);

    void set(const std::string& key, const std::string& value);
    const KeyValues& values() const noexcept { return values_; }
    std::string text() const;

    const std::string& str(const std::string& key) const;
    std::int64_t integer(const std::string& key) const;
    std::size_t count(const std::string& key) const;
    double real(const std::string& key) const;
    bool flag(const std::string& key) const;
    std::vector<std::string> list(const std::string& key) const;
    std::vector<std::uint64_t> seeds() const;

    std::uint64_t root_seed() const;
    std::filesystem::path output_dir() const { return str("output_dir"); }
    models::TrainConfig train_config(const std::string& prefix, std::string_view stage) const;
    diffusion::ScheduleConfig schedule() const;

private:
    KeyValues values_;
};

// Artifact lineage. Each stage digest covers its own keys and its upstream
// stages, so unrelated edits do not invalidate artifacts.
enum class Stage { data, encoder, decoder, dictionary, student, correction };
const char* to_string(Stage stage);
std::string stage_digest(const RunConfig& cfg, Stage stage);
// Digest over every result-affecting key of the resolved config.
std::string config_digest(const RunConfig& cfg);
std::string hex_digest(std::string_view bytes);

}  // namespace ddae::app
