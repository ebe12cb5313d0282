#include "ddae/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "ddae/error.hpp"

namespace ddae::metrics {

GroupAccuracy aga(std::span<const int> predictions, std::span<const int> y, std::span<const int> a) {
    require(predictions.size() == y.size() && y.size() == a.size(), "aga: sequences differ in length");
    GroupAccuracy out;
    std::array<std::size_t, 4> correct{};
    for (std::size_t i = 0; i < y.size(); ++i) {
        require((y[i] == 0 || y[i] == 1) && (a[i] == 0 || a[i] == 1), "aga: labels and attributes must be binary");
        const int g = 2 * y[i] + a[i];
        ++out.count[g];
        correct[g] += predictions[i] == y[i];
    }
    std::string missing;
    for (int g = 0; g < 4; ++g)
        if (out.count[g] == 0) missing += " (y=" + std::to_string(g / 2) + ",a=" + std::to_string(g % 2) + ")";
    if (!missing.empty()) fail(ErrorCode::undefined_group, "aga: empty group" + missing);
    double sum = 0.0;
    for (int g = 0; g < 4; ++g) {
        out.accuracy[g] = static_cast<double>(correct[g]) / static_cast<double>(out.count[g]);
        sum += out.accuracy[g];
    }
    out.aga = sum / 4.0;
    return out;
}

double nafr(std::span<const int> f_predictions, std::span<const int> oracle_predictions, std::span<const int> y_t) {
    require(f_predictions.size() == y_t.size() && oracle_predictions.size() == y_t.size(),
            "nafr: sequences differ in length");
    if (y_t.empty()) fail(ErrorCode::undefined_metric, "nafr: no counterfactual records");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < y_t.size(); ++i) hits += f_predictions[i] == y_t[i] && oracle_predictions[i] == y_t[i];
    return static_cast<double>(hits) / static_cast<double>(y_t.size());
}

double flip_rate(std::span<const int> f_predictions, std::span<const int> y_t) {
    require(f_predictions.size() == y_t.size(), "flip_rate: sequences differ in length");
    if (y_t.empty()) fail(ErrorCode::undefined_metric, "flip_rate: no counterfactual records");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < y_t.size(); ++i) hits += f_predictions[i] == y_t[i];
    return static_cast<double>(hits) / static_cast<double>(y_t.size());
}

double gain(double aga_baseline, double aga_corrected) {
    require(std::isfinite(aga_baseline) && std::isfinite(aga_corrected), "gain: non-finite input");
    if (aga_baseline >= 1.0) fail(ErrorCode::saturated_baseline, "gain: baseline AGA is 1, nothing left to close");
    return (aga_corrected - aga_baseline) / (1.0 - aga_baseline) * 100.0;
}

ReportRow make_row(std::string name, std::uint64_t seed, const GroupAccuracy& acc) {
    ReportRow r;
    r.name = std::move(name);
    r.seed = seed;
    r.group_accuracy = acc.accuracy;
    r.aga = acc.aga;
    return r;
}

const ReportRow* EvaluationReport::find(std::string_view name, std::uint64_t seed) const {
    for (const auto& r : rows)
        if (r.name == name && r.seed == seed) return &r;
    return nullptr;
}

// ---- CSV ---------------------------------------------------------------------

namespace {

constexpr std::array<const char*, 10> kColumns = {"name",     "seed",     "acc_y0_a0", "acc_y0_a1", "acc_y1_a0",
                                                  "acc_y1_a1", "aga", "nafr",      "gain",      "throughput"};

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string opt(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

double parse_double(const std::string& cell, const char* column) {
    try {
        std::size_t used = 0;
        const double v = std::stod(cell, &used);
        if (used != cell.size()) throw std::invalid_argument(cell);
        return v;
    } catch (const std::logic_error&) {
        fail(ErrorCode::format, std::string("report: bad number '") + cell + "' in column " + column);
    }
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            cells.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    cells.push_back(cur);
    return cells;
}

void check_row(const ReportRow& r) {
    double sum = 0.0;
    for (double acc : r.group_accuracy) {
        if (!(acc >= 0.0 && acc <= 1.0)) fail(ErrorCode::format, "report: group accuracy outside [0,1] in " + r.name);
        sum += acc;
    }
    if (std::abs(sum / 4.0 - r.aga) > 1e-12)
        fail(ErrorCode::format, "report: aga of '" + r.name + "' is not the mean of its group accuracies");
    if (r.nafr && !(*r.nafr >= 0.0 && *r.nafr <= 1.0)) fail(ErrorCode::format, "report: nafr outside [0,1]");
}

}  // namespace

std::string format_report(const EvaluationReport& report) {
    std::ostringstream out;
    out << "# schema=" << kReportSchema << '\n';
    out << "# config_digest=" << report.config_digest << '\n';
    out << "# timestamp=" << report.timestamp << '\n';
    for (const auto& [k, v] : report.provenance) {
        require(k.find_first_of("=\n") == std::string::npos && v.find('\n') == std::string::npos,
                "report: provenance entries must be single-line key=value");
        out << "# " << k << '=' << v << '\n';
    }
    for (std::size_t i = 0; i < kColumns.size(); ++i) out << (i ? "," : "") << kColumns[i];
    out << '\n';
    for (const auto& r : report.rows) {
        check_row(r);
        require(r.name.find_first_of(",\n") == std::string::npos, "report: row names cannot contain commas");
        out << r.name << ',' << r.seed;
        for (double acc : r.group_accuracy) out << ',' << num(acc);
        out << ',' << num(r.aga) << ',' << opt(r.nafr) << ',' << opt(r.gain) << ',' << opt(r.throughput) << '\n';
    }
    return out.str();
}

EvaluationReport parse_report(std::string_view text) {
    EvaluationReport report;
    std::istringstream in{std::string(text)};
    std::string line;
    bool schema_seen = false, header_seen = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line.rfind("# ", 0) == 0) {
            const auto eq = line.find('=');
            if (eq == std::string::npos) fail(ErrorCode::format, "report: malformed comment line");
            const std::string key = line.substr(2, eq - 2), value = line.substr(eq + 1);
            if (key == "schema") {
                if (value != kReportSchema) fail(ErrorCode::unsupported_version, "report: schema '" + value + "'");
                schema_seen = true;
            } else if (key == "config_digest") {
                report.config_digest = value;
            } else if (key == "timestamp") {
                report.timestamp = value;
            } else {
                report.provenance[key] = value;
            }
            continue;
        }
        const auto cells = split_csv(line);
        if (!header_seen) {
            if (cells.size() != kColumns.size()) fail(ErrorCode::format, "report: expected 10 columns");
            for (std::size_t i = 0; i < kColumns.size(); ++i)
                if (cells[i] != kColumns[i])
                    fail(ErrorCode::format, std::string("report: column ") + std::to_string(i) + " should be " +
                                                kColumns[i] + ", found '" + cells[i] + "'");
            header_seen = true;
            continue;
        }
        if (cells.size() != kColumns.size()) fail(ErrorCode::format, "report: row has the wrong number of cells");
        ReportRow r;
        r.name = cells[0];
        try {
            r.seed = std::stoull(cells[1]);
        } catch (const std::logic_error&) {
            fail(ErrorCode::format, "report: bad seed '" + cells[1] + "'");
        }
        for (std::size_t g = 0; g < 4; ++g) r.group_accuracy[g] = parse_double(cells[2 + g], kColumns[2 + g]);
        r.aga = parse_double(cells[6], "aga");
        if (!cells[7].empty()) r.nafr = parse_double(cells[7], "nafr");
        if (!cells[8].empty()) r.gain = parse_double(cells[8], "gain");
        if (!cells[9].empty()) r.throughput = parse_double(cells[9], "throughput");
        check_row(r);
        report.rows.push_back(std::move(r));
    }
    if (!schema_seen) fail(ErrorCode::format, "report: missing schema line");
    if (!header_seen) fail(ErrorCode::format, "report: missing column header");
    return report;
}

void write_report(const std::filesystem::path& path, const EvaluationReport& report) {
    write_file(path, format_report(report));
}

EvaluationReport read_report(const std::filesystem::path& path) { return parse_report(read_file(path)); }

void check_digest(const EvaluationReport& report, std::string_view expected) {
    if (report.config_digest != expected)
        fail(ErrorCode::validation, "report config digest " + report.config_digest + " does not match expected " +
                                        std::string(expected));
}

}  // namespace ddae::metrics
