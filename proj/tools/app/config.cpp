#include "app/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "ddae/error.hpp"
#include "ddae/rng.hpp"

namespace ddae::app {

const std::vector<ConfigKey>& config_schema() {
    static const std::vector<ConfigKey> schema = {
        {"seed", "1", ValueType::integer},
        {"seeds", "1,2,3", ValueType::seeds},
        {"output_dir", "ddae-out", ValueType::text},
        {"workers", "1", ValueType::integer},

        {"data.foundation_size", "5000", ValueType::integer},
        {"data.foundation_poison_ratio", "0.5", ValueType::real},
        {"data.train_size", "2000", ValueType::integer},
        {"data.poison_ratio", "0.98", ValueType::real},
        {"data.test_size", "1000", ValueType::integer},

        {"encoder.learning_rate", "0.3", ValueType::real},
        {"encoder.epochs", "200", ValueType::integer},
        {"encoder.batch_size", "32", ValueType::integer},
        {"encoder.weight_decay", "0", ValueType::real},

        {"renderer.learning_rate", "0.002", ValueType::real},
        {"renderer.epochs", "40", ValueType::integer},
        {"renderer.batch_size", "32", ValueType::integer},
        {"renderer.weight_decay", "0", ValueType::real},

        {"decoder.learning_rate", "0.001", ValueType::real},
        {"decoder.epochs", "40", ValueType::integer},
        {"decoder.batch_size", "32", ValueType::integer},
        {"decoder.weight_decay", "0", ValueType::real},

        {"schedule.steps", "50", ValueType::integer},
        {"schedule.base_steps", "1000", ValueType::integer},
        {"schedule.beta_start", "0.0001", ValueType::real},
        {"schedule.beta_end", "0.02", ValueType::real},
        {"inversion.refine_iterations", "6", ValueType::integer},

        {"student.learning_rate", "0.02", ValueType::real},
        {"student.epochs", "20", ValueType::integer},
        {"student.batch_size", "32", ValueType::integer},
        {"student.weight_decay", "0", ValueType::real},

        {"oracle.learning_rate", "0.05", ValueType::real},
        {"oracle.epochs", "30", ValueType::integer},
        {"oracle.batch_size", "32", ValueType::integer},
        {"oracle.weight_decay", "0", ValueType::real},

        {"dictionary.method", "procrustes", ValueType::text},
        {"dictionary.causal", "fg_intensity", ValueType::list},
        {"dictionary.spurious", "bg_intensity", ValueType::list},

        {"explain.components", "x_pos,y_pos,fg_intensity,bg_intensity", ValueType::list},
        {"explain.count", "16", ValueType::integer},

        {"probe.ridge", "0.001", ValueType::real},
        {"probe.injection", "pixel", ValueType::text},

        {"cfkd.rounds", "3", ValueType::integer},
        {"cfkd.variants", "2", ValueType::integer},
        {"cfkd.components", "fg_intensity,bg_intensity", ValueType::list},
        {"cfkd.augmentation_weight", "1", ValueType::real},
        {"cfkd.subsample", "500", ValueType::integer},
        {"cfkd.warm_start", "true", ValueType::flag},
        {"cfkd.learning_rate", "0.02", ValueType::real},
        {"cfkd.epochs", "20", ValueType::integer},
        {"cfkd.batch_size", "32", ValueType::integer},
        {"cfkd.weight_decay", "0", ValueType::real},

        {"eval.nafr_sources", "100", ValueType::integer},
        {"eval.nafr_components", "fg_intensity,bg_intensity", ValueType::list},

        {"bench.batch_size", "16", ValueType::integer},
        {"bench.components", "x_pos,y_pos,fg_intensity,bg_intensity", ValueType::list},
        {"bench.repeats", "3", ValueType::integer},
    };
    return schema;
}

namespace {

const ConfigKey* lookup(std::string_view key) {
    for (const auto& k : config_schema())
        if (key == k.name) return &k;
    return nullptr;
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto comma = s.find(',', start);
        const auto item = trim(s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (!item.empty()) out.push_back(item);
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

bool parse_int(std::string_view s, std::int64_t& out) {
    const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
    return r.ec == std::errc() && r.ptr == s.data() + s.size();
}

bool parse_real(std::string_view s, double& out) {
    const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
    return r.ec == std::errc() && r.ptr == s.data() + s.size() && std::isfinite(out);
}

bool parse_flag(std::string_view s, bool& out) {
    if (s == "true" || s == "1" || s == "yes") return out = true, true;
    if (s == "false" || s == "0" || s == "no") return out = false, true;
    return false;
}

void check_value(const ConfigKey& k, const std::string& v) {
    auto bad = [&](const char* what) {
        fail(ErrorCode::validation, std::string("config key '") + k.name + "': expected " + what + ", got '" + v + "'");
    };
    std::int64_t i = 0;
    double r = 0.0;
    bool f = false;
    switch (k.type) {
    case ValueType::integer:
        if (!parse_int(v, i) || i < 0) bad("a non-negative integer");
        break;
    case ValueType::real:
        if (!parse_real(v, r)) bad("a finite number");
        break;
    case ValueType::flag:
        if (!parse_flag(v, f)) bad("true or false");
        break;
    case ValueType::seeds:
        if (split_list(v).empty()) bad("a comma-separated list of seeds");
        for (const auto& item : split_list(v))
            if (!parse_int(item, i) || i < 0) bad("a comma-separated list of non-negative integers");
        break;
    case ValueType::text:
        if (v.empty()) bad("a non-empty value");
        break;
    case ValueType::list:
        break;
    }
}

}  // namespace

RunConfig RunConfig::defaults() {
    RunConfig c;
    for (const auto& k : config_schema()) c.values_[k.name] = k.default_value;
    return c;
}

RunConfig RunConfig::parse(std::string_view text) {
    RunConfig c = defaults();
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            fail(ErrorCode::validation, "config line " + std::to_string(lineno) + ": expected key = value");
        c.set(trim(std::string_view(t).substr(0, eq)), trim(std::string_view(t).substr(eq + 1)));
    }
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) fail(ErrorCode::validation, "config file not found: " + path.string());
    return parse(read_file(path));
}

void RunConfig::set(const std::string& key, const std::string& value) {
    const ConfigKey* k = lookup(key);
    if (!k) fail(ErrorCode::validation, "unknown config key '" + key + "'");
    check_value(*k, value);
    values_[key] = value;
}

std::string RunConfig::text() const {
    std::string out;
    for (const auto& k : config_schema()) out += std::string(k.name) + " = " + values_.at(k.name) + "\n";
    return out;
}

const std::string& RunConfig::str(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) fail(ErrorCode::validation, "config key '" + key + "' is not set");
    return it->second;
}

std::int64_t RunConfig::integer(const std::string& key) const {
    std::int64_t v = 0;
    if (!parse_int(str(key), v)) fail(ErrorCode::validation, "config key '" + key + "' is not an integer");
    return v;
}

std::size_t RunConfig::count(const std::string& key) const { return static_cast<std::size_t>(integer(key)); }

double RunConfig::real(const std::string& key) const {
    double v = 0.0;
    if (!parse_real(str(key), v)) fail(ErrorCode::validation, "config key '" + key + "' is not a number");
    return v;
}

bool RunConfig::flag(const std::string& key) const {
    bool v = false;
    if (!parse_flag(str(key), v)) fail(ErrorCode::validation, "config key '" + key + "' is not a flag");
    return v;
}

std::vector<std::string> RunConfig::list(const std::string& key) const { return split_list(str(key)); }

std::vector<std::uint64_t> RunConfig::seeds() const {
    std::vector<std::uint64_t> out;
    for (const auto& s : list("seeds")) out.push_back(std::stoull(s));
    return out;
}

std::uint64_t RunConfig::root_seed() const { return static_cast<std::uint64_t>(integer("seed")); }

models::TrainConfig RunConfig::train_config(const std::string& prefix, std::string_view stage) const {
    models::TrainConfig t;
    t.learning_rate = real(prefix + ".learning_rate");
    t.epochs = count(prefix + ".epochs");
    t.batch_size = count(prefix + ".batch_size");
    t.weight_decay = real(prefix + ".weight_decay");
    t.seed = derive_seed(root_seed(), stage);
    return t;
}

diffusion::ScheduleConfig RunConfig::schedule() const {
    diffusion::ScheduleConfig s;
    s.steps = count("schedule.steps");
    s.base_steps = count("schedule.base_steps");
    s.beta_start = real("schedule.beta_start");
    s.beta_end = real("schedule.beta_end");
    return s;
}

const char* to_string(Stage stage) {
    switch (stage) {
    case Stage::data: return "data";
    case Stage::encoder: return "encoder";
    case Stage::decoder: return "decoder";
    case Stage::dictionary: return "dictionary";
    case Stage::student: return "student";
    case Stage::correction: return "correction";
    }
    return "?";
}

std::string hex_digest(std::string_view bytes) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
    return buf;
}

namespace {

std::string keys_with(const RunConfig& cfg, std::initializer_list<std::string_view> prefixes) {
    std::string out;
    for (const auto& [k, v] : cfg.values())
        for (auto p : prefixes)
            if (k == p || (p.back() == '.' && k.rfind(p, 0) == 0)) {
                out += k + "=" + v + "\n";
                break;
            }
    return out;
}

}  // namespace

std::string stage_digest(const RunConfig& cfg, Stage stage) {
    switch (stage) {
    case Stage::data:
        return hex_digest("data\n" + keys_with(cfg, {"seed", "seeds", "data."}));
    case Stage::encoder:
        return hex_digest("encoder\n" + stage_digest(cfg, Stage::data) + keys_with(cfg, {"encoder."}));
    case Stage::decoder:
        return hex_digest("decoder\n" + stage_digest(cfg, Stage::encoder) +
                          keys_with(cfg, {"renderer.", "decoder.", "schedule."}));
    case Stage::dictionary:
        return hex_digest("dictionary\n" + stage_digest(cfg, Stage::encoder) + keys_with(cfg, {"dictionary."}));
    case Stage::student:
        return hex_digest("student\n" + stage_digest(cfg, Stage::data) + keys_with(cfg, {"student.", "oracle."}));
    case Stage::correction:
        return hex_digest("correction\n" + stage_digest(cfg, Stage::decoder) + stage_digest(cfg, Stage::dictionary) +
                          stage_digest(cfg, Stage::student) + keys_with(cfg, {"cfkd.", "probe.", "inversion."}));
    }
    return {};
}

// Worker count and output location do not change results.
std::string config_digest(const RunConfig& cfg) {
    std::string text;
    for (const auto& [k, v] : cfg.values())
        if (k != "workers" && k != "output_dir") text += k + "=" + v + "\n";
    return hex_digest(text);
}

}  // namespace ddae::app
