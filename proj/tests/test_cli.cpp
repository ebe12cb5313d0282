#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "app/commands.hpp"
#include "app/config.hpp"
#include "ddae/error.hpp"

using namespace ddae;
using namespace ddae::app;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Report body minus the line recording the worker count, which is provenance
// rather than a result.
std::string report_without_workers(const fs::path& p) {
    std::ifstream in(p);
    std::string line, out;
    while (std::getline(in, line))
        if (!line.starts_with("# workers=")) out += line + "\n";
    return out;
}

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("ddae-test-" + name);
    fs::remove_all(p);
    return p;
}

// Small enough to run the whole pipeline in seconds; the numbers it produces
// carry no meaning beyond determinism.
RunConfig tiny(const fs::path& out) {
    return RunConfig::parse(
        "output_dir = " + out.string() + "\n"
        "seeds = 4\n"
        "data.foundation_size = 1000\n"
        "data.train_size = 160\n"
        "data.test_size = 80\n"
        "encoder.epochs = 60\n"
        "renderer.epochs = 2\n"
        "decoder.epochs = 2\n"
        "schedule.steps = 4\n"
        "inversion.refine_iterations = 2\n"
        "student.epochs = 3\n"
        "oracle.epochs = 3\n"
        "cfkd.rounds = 1\n"
        "cfkd.subsample = 40\n"
        "cfkd.epochs = 2\n"
        "explain.count = 4\n"
        "eval.nafr_sources = 10\n"
        "bench.batch_size = 4\n"
        "bench.repeats = 1\n");
}

}  // namespace

TEST_CASE("config parsing") {
    const RunConfig d = RunConfig::defaults();
    CHECK(d.seeds() == std::vector<std::uint64_t>{1, 2, 3});
    CHECK(d.real("data.poison_ratio") == 0.98);
    CHECK(d.flag("cfkd.warm_start"));

    const RunConfig p = RunConfig::parse("# comment\n\nstudent.epochs = 7\nseeds=5,6\n");
    CHECK(p.count("student.epochs") == 7);
    CHECK(p.seeds() == std::vector<std::uint64_t>{5, 6});
    CHECK(RunConfig::parse(p.text()).values() == p.values());

    CHECK_THROWS_AS(RunConfig::parse("no.such.key = 1\n"), Error);
    CHECK_THROWS_AS(RunConfig::parse("student.epochs = seven\n"), Error);
    CHECK_THROWS_AS(RunConfig::parse("cfkd.warm_start = maybe\n"), Error);
    CHECK_THROWS_AS(RunConfig::parse("just a line\n"), Error);
    CHECK_THROWS_AS(RunConfig::load("/nonexistent/ddae.conf"), Error);
}

TEST_CASE("stage digests track their own keys and upstream stages only") {
    const RunConfig a = RunConfig::defaults();
    CHECK(stage_digest(a, Stage::decoder) == stage_digest(RunConfig::defaults(), Stage::decoder));

    RunConfig b = a;
    b.set("student.epochs", "21");
    CHECK(stage_digest(b, Stage::student) != stage_digest(a, Stage::student));
    CHECK(stage_digest(b, Stage::correction) != stage_digest(a, Stage::correction));
    CHECK(stage_digest(b, Stage::encoder) == stage_digest(a, Stage::encoder));
    CHECK(stage_digest(b, Stage::decoder) == stage_digest(a, Stage::decoder));

    RunConfig c = a;
    c.set("data.train_size", "1999");
    for (Stage s : {Stage::data, Stage::encoder, Stage::decoder, Stage::dictionary, Stage::student})
        CHECK(stage_digest(c, s) != stage_digest(a, s));

    RunConfig w = a;
    w.set("workers", "8");
    w.set("output_dir", "elsewhere");
    CHECK(config_digest(w) == config_digest(a));
    CHECK(config_digest(b) != config_digest(a));
}

TEST_CASE("exit codes") {
    CHECK(exit_code(ErrorCode::validation) == 2);
    CHECK(exit_code(ErrorCode::invalid_input) == 2);
    CHECK(exit_code(ErrorCode::format) == 2);
    CHECK(exit_code(ErrorCode::training_failure) == 3);
    CHECK(exit_code(ErrorCode::measurement_failure) == 3);
    CHECK(exit_code(ErrorCode::numerical_failure) == 4);
    CHECK(exit_code(ErrorCode::singularity) == 4);
}

TEST_CASE("option parsers") {
    CHECK(parse_explain_algo("invert") == ExplainAlgo::invert);
    CHECK(parse_strategy("cfkd") == Strategy::cfkd);
    CHECK(parse_target("probe") == Target::probe);
    CHECK_THROWS_AS(parse_strategy("retrain"), Error);
}

TEST_CASE("commands refuse missing and stale inputs") {
    const fs::path out = scratch_dir("stale");
    RunConfig cfg = tiny(out);
    std::ostringstream log;
    try {
        cmd_eval(cfg, log);
        FAIL("eval without artifacts must fail");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::validation);
    }

    cmd_gen_data(cfg, log);
    CHECK(fs::exists(Layout(out).foundation()));
    CHECK(fs::exists(out / "data" / "config.conf"));

    RunConfig changed = cfg;
    changed.set("data.foundation_size", "250");
    try {
        cmd_train_encoder(changed, log);
        FAIL("stale foundation split must be refused");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::validation);
        CHECK(std::string(e.what()).find("gen-data") != std::string::npos);
    }
    fs::remove_all(out);
}

TEST_CASE("project strategy needs a probe target") {
    const fs::path out = scratch_dir("project");
    std::ostringstream log;
    try {
        cmd_correct(tiny(out), Strategy::project, Target::student, log);
        FAIL("project on the student must be rejected");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::validation);
    }
    fs::remove_all(out);
}

TEST_CASE("end-to-end runs are deterministic") {
    ::setenv("SOURCE_DATE_EPOCH", "1700000000", 1);
    CHECK(report_timestamp() == "2023-11-14T22:13:20Z");

    const fs::path a = scratch_dir("run-a"), b = scratch_dir("run-b");
    std::ostringstream log;
    cmd_run_all(tiny(a), log);
    RunConfig cb = tiny(b);
    cb.set("workers", "2");
    cmd_run_all(cb, log);

    const Layout la(a), lb(b);
    CHECK(report_without_workers(la.eval_report()) == report_without_workers(lb.eval_report()));
    CHECK(slurp(la.eval_report()).find("timestamp=2023-11-14T22:13:20Z") != std::string::npos);
    CHECK(slurp(la.encoder()) == slurp(lb.encoder()));
    CHECK(slurp(la.decoder()) == slurp(lb.decoder()));
    CHECK(slurp(la.student(4)) == slurp(lb.student(4)));
    CHECK(fs::exists(la.bench_report()));
    CHECK(fs::exists(la.explain_dir("invert") / "summary.txt"));

#ifdef DDAE_CLI_PATH
    // Same report from the binary, through the global options.
    const fs::path c = scratch_dir("run-c");
    const std::string conf = (a / "eval" / "config.conf").string();
    const std::string cmd = std::string(DDAE_CLI_PATH) + " -c " + conf + " -o " + c.string() + " run-all > /dev/null";
    CHECK(std::system(cmd.c_str()) == 0);
    CHECK(slurp(Layout(c).eval_report()) == slurp(la.eval_report()));
    const std::string bad = std::string(DDAE_CLI_PATH) + " -o " + c.string() + " -s nope=1 eval > /dev/null 2>&1";
    CHECK(WEXITSTATUS(std::system(bad.c_str())) == 2);
    fs::remove_all(c);
#endif
    fs::remove_all(a);
    fs::remove_all(b);
    ::unsetenv("SOURCE_DATE_EPOCH");
}
