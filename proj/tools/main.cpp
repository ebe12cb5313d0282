#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "app/commands.hpp"
#include "app/config.hpp"
#include "ddae/container.hpp"

using namespace ddae;
using namespace ddae::app;

namespace {

RunConfig resolve(const std::string& config_path, const std::vector<std::string>& sets, const std::string& output,
                  int workers) {
    RunConfig cfg = config_path.empty() ? RunConfig::defaults() : RunConfig::load(config_path);
    for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) fail(ErrorCode::validation, "--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!output.empty()) cfg.set("output_dir", output);
    if (workers > 0) cfg.set("workers", std::to_string(workers));
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ddae: disentangled diffusion autoencoder counterfactual pipeline on the Square benchmark"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, output;
    std::vector<std::string> sets;
    int workers = 0;
    app.add_option("-c,--config", config_path, "key=value config file (defaults used for missing keys)");
    app.add_option("-s,--set", sets, "override one config key, key=value (repeatable)");
    app.add_option("-o,--output", output, "output directory (overrides output_dir)");
    app.add_option("-w,--workers", workers, "cap on worker threads")->check(CLI::PositiveNumber);

    auto* gen = app.add_subcommand("gen-data", "sample the foundation split and per-seed train/test splits");
    auto* enc = app.add_subcommand("train-encoder", "train the frozen foundation encoder");
    auto* dec = app.add_subcommand("train-decoder", "train the conditional diffusion decoder");
    auto* stu = app.add_subcommand("train-student", "train per-seed students and their distilled oracles");

    auto* dict = app.add_subcommand("fit-dict", "fit the disentangled dictionary");
    std::string method;
    dict->add_option("--method", method, "procrustes or svd")->check(CLI::IsMember({"procrustes", "svd"}));

    auto* expl = app.add_subcommand("explain", "generate counterfactual explanations");
    std::string algo, components;
    expl->add_option("--algo", algo, "reflect or invert")->required()->check(CLI::IsMember({"reflect", "invert"}));
    expl->add_option("--components", components, "comma-separated component names or indices");

    auto* corr = app.add_subcommand("correct", "correct a shortcut by projection or counterfactual distillation");
    std::string strategy, target = "student", mode;
    corr->add_option("--strategy", strategy, "project or cfkd")->required()->check(CLI::IsMember({"project", "cfkd"}));
    corr->add_option("--target", target, "student or probe")->check(CLI::IsMember({"student", "probe"}));
    corr->add_option("--mode", mode, "probe counterfactual injection: pixel or embedding")
        ->check(CLI::IsMember({"pixel", "embedding"}));

    auto* ev = app.add_subcommand("eval", "write the evaluation report (AGA, NAFR, Gain)");
    auto* bench = app.add_subcommand("bench", "measure counterfactual throughput");
    auto* all = app.add_subcommand("run-all", "run the full experiment end to end");
    auto* show = app.add_subcommand("show-config", "print the fully resolved config");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        RunConfig cfg = resolve(config_path, sets, output, workers);
        if (!method.empty()) cfg.set("dictionary.method", method);
        if (!components.empty()) cfg.set("explain.components", components);
        if (!mode.empty()) cfg.set("probe.injection", mode);

        std::cout << std::unitbuf;
        auto& log = std::cout;
        if (*gen) cmd_gen_data(cfg, log);
        else if (*enc) cmd_train_encoder(cfg, log);
        else if (*dec) cmd_train_decoder(cfg, log);
        else if (*stu) cmd_train_student(cfg, log);
        else if (*dict) cmd_fit_dict(cfg, log);
        else if (*expl) cmd_explain(cfg, parse_explain_algo(algo), log);
        else if (*corr) cmd_correct(cfg, parse_strategy(strategy), parse_target(target), log);
        else if (*ev) cmd_eval(cfg, log);
        else if (*bench) cmd_bench(cfg, log);
        else if (*all) cmd_run_all(cfg, log);
        else if (*show) std::cout << cfg.text();
    } catch (const Error& e) {
        std::cerr << "ddae: " << e.what() << "\n";
        return exit_code(e.code());
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "ddae: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
