#include "app/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <ostream>
#include <utility>

#include "ddae/correction.hpp"
#include "ddae/counterfactual.hpp"
#include "ddae/dictionary.hpp"
#include "ddae/diffusion.hpp"
#include "ddae/metrics.hpp"
#include "ddae/models.hpp"
#include "ddae/rng.hpp"
#include "ddae/squares.hpp"

namespace fs = std::filesystem;

namespace ddae::app {

using dictionary::ConceptRole;
using squares::DatasetSplit;

int exit_code(ErrorCode code) {
    switch (code) {
    case ErrorCode::training_failure:
    case ErrorCode::measurement_failure:
        return 3;
    case ErrorCode::numerical_failure:
    case ErrorCode::singularity:
        return 4;
    default:
        return 2;
    }
}

fs::path Layout::train_split(std::uint64_t seed) const {
    return root / "data" / ("seed-" + std::to_string(seed)) / "train.ddae";
}
fs::path Layout::test_split(std::uint64_t seed) const {
    return root / "data" / ("seed-" + std::to_string(seed)) / "test.ddae";
}
fs::path Layout::student(std::uint64_t seed) const {
    return root / "student" / ("seed-" + std::to_string(seed)) / "student.ddae";
}
fs::path Layout::oracle(std::uint64_t seed) const {
    return root / "student" / ("seed-" + std::to_string(seed)) / "oracle.ddae";
}
fs::path Layout::correct_dir(const std::string& name, std::uint64_t seed) const {
    return root / "correct" / name / ("seed-" + std::to_string(seed));
}

ExplainAlgo parse_explain_algo(const std::string& text) {
    if (text == "reflect") return ExplainAlgo::reflect;
    if (text == "invert") return ExplainAlgo::invert;
    fail(ErrorCode::validation, "unknown explain algorithm '" + text + "' (expected reflect or invert)");
}

Strategy parse_strategy(const std::string& text) {
    if (text == "project") return Strategy::project;
    if (text == "cfkd") return Strategy::cfkd;
    fail(ErrorCode::validation, "unknown correction strategy '" + text + "' (expected project or cfkd)");
}

Target parse_target(const std::string& text) {
    if (text == "student") return Target::student;
    if (text == "probe") return Target::probe;
    fail(ErrorCode::validation, "unknown correction target '" + text + "' (expected student or probe)");
}

std::string report_timestamp() {
    std::time_t t = 0;
    if (const char* sde = std::getenv("SOURCE_DATE_EPOCH"); sde && *sde)
        t = static_cast<std::time_t>(std::strtoll(sde, nullptr, 10));
    else
        t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

namespace {

struct Input {
    fs::path path;
    std::string digest;
};

// Bookkeeping for one stage's output directory: resolved config plus the
// digests of every artifact it consumed.
class StageOutput {
public:
    StageOutput(const RunConfig& cfg, fs::path dir) : cfg_(cfg), dir_(std::move(dir)) { fs::create_directories(dir_); }
    void add_input(const fs::path& path, const std::string& digest) {
        for (const auto& in : inputs_)
            if (in.path == path) return;
        inputs_.push_back({path, digest});
    }
    const fs::path& dir() const { return dir_; }

    void finish() const {
        write_file(dir_ / "config.conf", cfg_.text());
        std::string lines = "artifact,stage_digest,content_digest\n";
        for (const auto& in : inputs_)
            lines += fs::relative(in.path, cfg_.output_dir()).generic_string() + "," + in.digest + "," +
                     hex_digest(read_file(in.path)) + "\n";
        write_file(dir_ / "inputs.csv", lines);
    }

private:
    const RunConfig& cfg_;
    fs::path dir_;
    std::vector<Input> inputs_;
};

KeyValues stamp(const RunConfig& cfg, Stage stage) {
    return {{"stage", to_string(stage)}, {"stage_digest", stage_digest(cfg, stage)}};
}

void require_exists(const fs::path& path, const char* producer) {
    if (!fs::exists(path))
        fail(ErrorCode::validation,
             "missing artifact " + path.string() + "; run `ddae " + producer + "` with this config first");
}

void check_stamp(const fs::path& path, const KeyValues& header, const RunConfig& cfg, Stage stage,
                 const char* producer) {
    const std::string expected = stage_digest(cfg, stage);
    const auto it = header.find("stage_digest");
    const std::string found = it == header.end() ? "<none>" : it->second;
    if (found != expected)
        fail(ErrorCode::validation, "artifact " + path.string() + " was produced with " + to_string(stage) +
                                        " digest " + found + " but the current config resolves to " + expected +
                                        "; rerun `ddae " + producer + "`");
}

template <class Loader>
auto load_checked(const fs::path& path, const RunConfig& cfg, Stage stage, const char* producer,
                  StageOutput* out, Loader loader) {
    require_exists(path, producer);
    KeyValues header;
    auto value = loader(path, &header);
    check_stamp(path, header, cfg, stage, producer);
    if (out) out->add_input(path, header.at("stage_digest"));
    return value;
}

DatasetSplit load_split(const fs::path& p, const RunConfig& cfg, StageOutput* out) {
    return load_checked(p, cfg, Stage::data, "gen-data", out,
                        [](const fs::path& f, KeyValues* h) { return squares::load_split(f, h); });
}

models::MlpModel load_model(const fs::path& p, const RunConfig& cfg, Stage stage, const char* producer,
                            StageOutput* out) {
    return load_checked(p, cfg, stage, producer, out,
                        [](const fs::path& f, KeyValues* h) { return models::load_model(f, h); });
}

diffusion::DenoiserModel load_decoder(const RunConfig& cfg, StageOutput* out) {
    auto dm = load_checked(Layout(cfg.output_dir()).decoder(), cfg, Stage::decoder, "train-decoder", out,
                           [](const fs::path& f, KeyValues* h) { return diffusion::load_denoiser(f, h); });
    dm.workers = std::max<std::size_t>(1, cfg.count("workers"));
    return dm;
}

dictionary::Dictionary load_dict(const RunConfig& cfg, StageOutput* out) {
    return load_checked(Layout(cfg.output_dir()).dictionary(), cfg, Stage::dictionary, "fit-dict", out,
                        [](const fs::path& f, KeyValues* h) { return dictionary::load_dictionary(f, h); });
}

models::TrainConfig seeded(models::TrainConfig t, std::uint64_t seed, std::string_view stage) {
    t.seed = derive_seed(seed, stage);
    return t;
}

std::vector<std::string> latent_names() { return {squares::kLatentNames.begin(), squares::kLatentNames.end()}; }

std::vector<std::size_t> resolve_components(const dictionary::Dictionary& d, const std::vector<std::string>& names) {
    std::vector<std::size_t> out;
    for (const auto& n : names) {
        const bool numeric = !n.empty() && n.find_first_not_of("0123456789") == std::string::npos;
        const std::size_t k = numeric ? std::stoull(n) : d.index_of(n);
        if (k >= d.dim()) fail(ErrorCode::validation, "component " + n + " is out of range");
        out.push_back(k);
    }
    if (out.empty()) fail(ErrorCode::validation, "no components selected");
    return out;
}

Matrix first_rows(const Matrix& m, std::size_t n) {
    n = std::min(n, m.rows());
    Matrix out(n, m.cols());
    for (std::size_t i = 0; i < n; ++i) out.set_row(i, m.row(i));
    return out;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

// Concept map with flip rules calibrated on the foundation split.
correction::ConceptMap calibrated_map(const dictionary::Dictionary& d, const models::MlpModel& encoder,
                                      const DatasetSplit& foundation) {
    auto map = correction::concept_map_from_dictionary(d);
    correction::calibrate_flip_rules(map, d, models::embed(encoder, foundation.images()), foundation.labels());
    return map;
}

correction::CfkdConfig cfkd_config(const RunConfig& cfg, const dictionary::Dictionary& d, std::uint64_t seed) {
    correction::CfkdConfig c;
    c.rounds = cfg.count("cfkd.rounds");
    c.variants = cfg.count("cfkd.variants");
    c.components = resolve_components(d, cfg.list("cfkd.components"));
    c.augmentation_weight = cfg.real("cfkd.augmentation_weight");
    c.subsample = cfg.count("cfkd.subsample");
    c.warm_start = cfg.flag("cfkd.warm_start");
    c.retrain = seeded(cfg.train_config("cfkd", "cfkd"), seed, "cfkd-retrain");
    c.seed = derive_seed(seed, "cfkd");
    return c;
}

diffusion::InversionOptions inversion_options(const RunConfig& cfg) {
    diffusion::InversionOptions o;
    o.refine_iterations = cfg.count("inversion.refine_iterations");
    return o;
}

std::string spurious_name(const RunConfig& cfg) {
    const auto names = cfg.list("dictionary.spurious");
    if (names.empty()) fail(ErrorCode::validation, "dictionary.spurious names no concept");
    return names.front();
}

}  // namespace

void cmd_gen_data(const RunConfig& cfg, std::ostream& log) {
    const Layout lay(cfg.output_dir());
    StageOutput out(cfg, lay.root / "data");
    const KeyValues tag = stamp(cfg, Stage::data);
    const auto foundation = squares::sample_train(cfg.count("data.foundation_size"),
                                                  cfg.real("data.foundation_poison_ratio"),
                                                  derive_seed(cfg.root_seed(), "foundation"));
    squares::save_split(lay.foundation(), foundation, tag);
    log << "foundation split: " << foundation.size() << " samples\n";
    for (auto s : cfg.seeds()) {
        fs::create_directories(lay.train_split(s).parent_path());
        squares::save_split(lay.train_split(s),
                            squares::sample_train(cfg.count("data.train_size"), cfg.real("data.poison_ratio"),
                                                  derive_seed(s, "train-split")),
                            tag);
        squares::save_split(lay.test_split(s),
                            squares::sample_balanced_test(cfg.count("data.test_size"), derive_seed(s, "test-split")),
                            tag);
        log << "seed " << s << ": train/test splits written\n";
    }
    out.finish();
}

void cmd_train_encoder(const RunConfig& cfg, std::ostream& log) {
    const Layout lay(cfg.output_dir());
    StageOutput out(cfg, lay.root / "encoder");
    const auto foundation = load_split(lay.foundation(), cfg, &out);
    models::EncoderReport rep;
    const auto enc = models::train_encoder(foundation, cfg.train_config("encoder", "encoder"), &rep);
    models::save_model(lay.encoder(), enc, stamp(cfg, Stage::encoder));
    std::string csv = "latent,heldout_mse\n";
    for (std::size_t j = 0; j < rep.heldout_mse_per_latent.size(); ++j)
        csv += std::string(squares::kLatentNames[j]) + "," + fmt(rep.heldout_mse_per_latent[j]) + "\n";
    csv += "mean," + fmt(rep.heldout_mse) + "\n";
    write_file(out.dir() / "report.csv", csv);
    log << "encoder: held-out latent MSE " << fmt(rep.heldout_mse) << " (initial " << fmt(rep.initial_heldout_mse)
        << ")\n";
    out.finish();
}

void cmd_train_decoder(const RunConfig& cfg, std::ostream& log) {
    const Layout lay(cfg.output_dir());
    StageOutput out(cfg, lay.root / "decoder");
    const auto foundation = load_split(lay.foundation(), cfg, &out);
    const auto enc = load_model(lay.encoder(), cfg, Stage::encoder, "train-encoder", &out);
    diffusion::DenoiserReport rep;
    const auto dm = diffusion::train_denoiser(foundation, enc, cfg.train_config("decoder", "decoder"),
                                              cfg.train_config("renderer", "renderer"), cfg.schedule(), &rep);
    diffusion::save_denoiser(lay.decoder(), dm, stamp(cfg, Stage::decoder));
    std::string csv = "epoch,renderer_loss,noise_loss\n";
    const std::size_t epochs = std::max(rep.renderer_epoch_loss.size(), rep.epoch_loss.size());
    for (std::size_t e = 0; e < epochs; ++e)
        csv += std::to_string(e + 1) + "," +
               (e < rep.renderer_epoch_loss.size() ? fmt(rep.renderer_epoch_loss[e]) : std::string()) + "," +
               (e < rep.epoch_loss.size() ? fmt(rep.epoch_loss[e]) : std::string()) + "\n";
    write_file(out.dir() / "training.csv", csv);
    write_file(out.dir() / "report.csv",
               "initial_renderer_mse,renderer_mse,residual_scale,initial_loss,final_loss\n" +
                   fmt(rep.initial_renderer_mse) + "," + fmt(rep.renderer_mse) + "," + fmt(rep.residual_scale) + "," +
                   fmt(rep.initial_loss) + "," + fmt(rep.final_loss) + "\n");
    log << "decoder: renderer MSE " << fmt(rep.initial_renderer_mse) << " -> " << fmt(rep.renderer_mse)
        << ", denoising loss " << fmt(rep.initial_loss) << " -> " << fmt(rep.final_loss) << "\n";
    out.finish();
}

void cmd_train_student(const RunConfig& cfg, std::ostream& log) {
    const Layout lay(cfg.output_dir());
    StageOutput out(cfg, lay.root / "student");
    // Oracles are distilled on the unpoisoned foundation split: on the poisoned
    // split the background alone reproduces almost any f.
    const auto foundation = load_split(lay.foundation(), cfg, &out);
    std::string csv = "seed,train_accuracy,oracle_train_agreement,oracle_heldout_agreement,oracle_test_label_agreement\n";
    for (auto s : cfg.seeds()) {
        const auto train = load_split(lay.train_split(s), cfg, &out);
        const auto test = load_split(lay.test_split(s), cfg, &out);
        models::StudentReport srep;
        const auto f = models::train_student(train, seeded(cfg.train_config("student", "student"), s, "student"),
                                             &srep);
        models::OracleReport orep;
        const auto o =
            models::distill_oracle(f, foundation, seeded(cfg.train_config("oracle", "oracle"), s, "oracle"), &orep);
        const double analytic_agreement =
            models::accuracy(models::predict_classes(o, test.images()), test.labels());
        fs::create_directories(lay.student(s).parent_path());
        models::save_model(lay.student(s), f, stamp(cfg, Stage::student));
        models::save_model(lay.oracle(s), o, stamp(cfg, Stage::student));
        for (const auto& w : srep.warnings) log << "seed " << s << ": warning: " << w << "\n";
        log << "seed " << s << ": student train accuracy " << fmt(srep.train_accuracy) << ", oracle agreement "
            << fmt(orep.train_agreement) << "\n";
        csv += std::to_string(s) + "," + fmt(srep.train_accuracy) + "," + fmt(orep.train_agreement) + "," +
               fmt(orep.heldout_agreement) + "," + fmt(analytic_agreement) + "\n";
    }
    write_file(out.dir() / "report.csv", csv);
    out.finish();
}

void cmd_fit_dict(const RunConfig& cfg, std::ostream& log) {
    const Layout lay(cfg.output_dir());
    StageOutput out(cfg, lay.root / "dictionary");
    const auto foundation = load_split(lay.foundation(), cfg, &out);
    const auto enc = load_model(lay.encoder(), cfg, Stage::encoder, "train-encoder", &out);
    const Matrix z = models::embed(enc, foundation.images());
    const Matrix s = foundation.latent_matrix();
    const auto names = latent_names();

    std::vector<ConceptRole> roles(names.size(), ConceptRole::unknown);
    auto assign = [&](const std::string& key, ConceptRole role) {
        for (const auto& n : cfg.list(key)) {
            const auto it = std::find(names.begin(), names.end(), n);
            if (it == names.end()) fail(ErrorCode::validation, key + " names unknown concept '" + n + "'");
            roles[static_cast<std::size_t>(it - names.begin())] = role;
        }
    };
    assign("dictionary.causal", ConceptRole::causal);
    assign("dictionary.spurious", ConceptRole::spurious);

    const std::string method = cfg.str("dictionary.method");
    dictionary::Dictionary d;
    std::string csv;
    if (method == "procrustes") {
        dictionary::ProcrustesReport rep;
        d = dictionary::fit_procrustes(z, dictionary::standardize_columns(s), names, &rep);
        csv = "component,singular_value,alignment_correlation\n";
        for (std::size_t k = 0; k < rep.alignment_correlation.size(); ++k)
            csv += std::to_string(k) + "," + fmt(rep.singular_values[k]) + "," + fmt(rep.alignment_correlation[k]) +
                   "\n";
    } else if (method == "svd") {
        dictionary::SvdReport rep;
        d = dictionary::fit_svd(z, &rep);
        csv = "component,singular_value,explained_variance\n";
        for (std::size_t k = 0; k < rep.singular_values.size(); ++k)
            csv += std::to_string(k) + "," + fmt(rep.singular_values[k]) + "," + fmt(rep.explained_variance[k]) +
                   "\n";
    } else {
        fail(ErrorCode::validation, "unknown dictionary method '" + method + "' (expected procrustes or svd)");
    }
    d = dictionary::annotate_components(d, dictionary::annotations_from_metadata(d, z, s, names, roles));
    dictionary::save_dictionary(lay.dictionary(), d, stamp(cfg, Stage::dictionary));
    write_file(out.dir() / "report.csv", csv);

    std::string ann = "component,name,role\n";
    for (std::size_t k = 0; k < d.annotations.size(); ++k)
        if (d.annotations[k])
            ann += std::to_string(k) + "," + d.annotations[k]->name + "," + dictionary::to_string(d.annotations[k]->role) +
                   "\n";
    write_file(out.dir() / "annotations.csv", ann);
    log << "dictionary (" << method << "): " << d.dim() << " components\n" << ann;
    out.finish();
}

ExplainSummary cmd_explain(const RunConfig& cfg, ExplainAlgo algo, std::ostream& log) {
    const Layout lay(cfg.output_dir());
    const std::string name = algo == ExplainAlgo::reflect ? "reflect" : "invert";
    StageOutput out(cfg, lay.explain_dir(name));
    const std::uint64_t s = cfg.seeds().front();
    const auto train = load_split(lay.train_split(s), cfg, &out);
    const auto test = load_split(lay.test_split(s), cfg, &out);
    const auto enc = load_model(lay.encoder(), cfg, Stage::encoder, "train-encoder", &out);
    const auto dm = load_decoder(cfg, &out);
    const auto d = load_dict(cfg, &out);
    const auto f = load_model(lay.student(s), cfg, Stage::student, "train-student", &out);

    counterfactual::Pipeline p{&enc, &dm, &d, inversion_options(cfg)};
    counterfactual::Batch batch;
    batch.images = first_rows(test.images(), cfg.count("explain.count"));
    batch.source_predictions = models::predict_classes(f, batch.images);
    const auto comps = resolve_components(d, cfg.list("explain.components"));
    const auto probe = correction::fit_label_probe(models::embed(enc, train.images()), train.labels(),
                                                   cfg.real("probe.ridge"));
    counterfactual::GenerationOptions opts;
    opts.seed = derive_seed(cfg.root_seed(), "explain");

    const auto res = algo == ExplainAlgo::reflect ? counterfactual::generate_reflections(p, batch, comps, opts, &probe)
                                                  : counterfactual::generate_inversions(p, probe, batch, comps, opts);
    counterfactual::export_records(out.dir(), res.records);
    for (std::size_t i = 0; i < batch.images.rows(); ++i) {
        char file[64];
        std::snprintf(file, sizeof file, "src_%zu.pgm", i);
        counterfactual::write_pgm(out.dir() / "images" / file, batch.images.row(i));
    }
    std::string summary = "records=" + std::to_string(res.records.size()) + "\n" +
                          "inversions=" + std::to_string(res.inversions) + "\n" +
                          "decodes=" + std::to_string(res.decodes) + "\n" +
                          "backward_passes=" + std::to_string(res.backward_passes) + "\n";
    for (const auto& n : res.notes) summary += "note=" + n + "\n";
    write_file(out.dir() / "summary.txt", summary);
    log << "explain " << name << ": " << res.records.size() << " records, " << res.backward_passes
        << " backward passes\n";
    out.finish();
    return {res.records.size(), res.backward_passes, res.notes};
}

void cmd_correct(const RunConfig& cfg, Strategy strategy, Target target, std::ostream& log) {
    if (strategy == Strategy::project && target == Target::student)
        fail(ErrorCode::validation, "projection edits embeddings and applies to --target probe only");
    const Layout lay(cfg.output_dir());
    const auto mode = correction::parse_injection_mode(cfg.str("probe.injection"));
    const std::string name = strategy == Strategy::project ? "project-probe"
                             : target == Target::probe      ? std::string("cfkd-probe-") + correction::to_string(mode)
                                                            : "cfkd-student";
    StageOutput out(cfg, lay.root / "correct" / name);
    const auto enc = load_model(lay.encoder(), cfg, Stage::encoder, "train-encoder", &out);
    const auto d = load_dict(cfg, &out);
    const double ridge = cfg.real("probe.ridge");
    const KeyValues tag = stamp(cfg, Stage::correction);

    std::optional<diffusion::DenoiserModel> dm;
    std::optional<correction::ConceptMap> map;
    std::optional<DatasetSplit> foundation;
    if (strategy == Strategy::cfkd) {
        dm = load_decoder(cfg, &out);
        foundation = load_split(lay.foundation(), cfg, &out);
        map = calibrated_map(d, enc, *foundation);
    }

    for (auto s : cfg.seeds()) {
        const auto train = load_split(lay.train_split(s), cfg, &out);
        const auto test = load_split(lay.test_split(s), cfg, &out);
        const fs::path dir = lay.correct_dir(name, s);
        fs::create_directories(dir);
        metrics::EvaluationReport report;
        std::vector<correction::RoundLog> rounds;
        bool completed = true;
        std::string abort_reason;

        if (strategy == Strategy::project) {
            report = correction::projected_probe_pipeline(enc, d.direction(d.index_of(spurious_name(cfg))), train, test,
                                                          s, ridge);
        } else {
            counterfactual::Pipeline p{&enc, &*dm, &d, inversion_options(cfg)};
            const auto ccfg = cfkd_config(cfg, d, s);
            if (target == Target::probe) {
                auto r = correction::foundation_probe_cfkd(p, *map, train, test, ccfg, mode, ridge);
                models::probe_to_container(r.probe, tag).save(dir / "probe.ddae");
                report = std::move(r.report);
                rounds = std::move(r.rounds);
                completed = r.completed;
                abort_reason = r.abort_reason;
            } else {
                const auto f = load_model(lay.student(s), cfg, Stage::student, "train-student", &out);
                auto r = correction::cfkd_run(f, p, *map, train, test, ccfg);
                rounds = std::move(r.rounds);
                report = std::move(r.report);
                completed = r.completed;
                abort_reason = r.abort_reason;
                if (completed) {
                    models::OracleReport orep;
                    const auto o = models::distill_oracle(
                        r.student, *foundation, seeded(cfg.train_config("oracle", "oracle"), s, "oracle-corrected"),
                        &orep);
                    models::save_model(dir / "student.ddae", r.student, tag);
                    models::save_model(dir / "oracle.ddae", o, tag);
                }
            }
            write_file(dir / "round_log.csv", correction::format_round_log(rounds));
        }
        for (auto& row : report.rows) row.seed = s;
        report.config_digest = stage_digest(cfg, Stage::correction);
        report.timestamp = report_timestamp();
        metrics::write_report(dir / "report.csv", report);
        if (!completed) {
            out.finish();
            fail(ErrorCode::training_failure, "seed " + std::to_string(s) + ": correction aborted: " + abort_reason);
        }
        const auto& last = report.rows.back();
        log << "seed " << s << ": " << name << " " << last.name << " AGA " << fmt(last.aga) << "\n";
    }
    out.finish();
}

namespace {

struct NafrBatch {
    Matrix sources;
    Matrix images;
    std::vector<std::size_t> source_index;
    std::vector<int> analytic;  // -1 when the analytic labeler finds no square
    std::size_t ambiguous = 0;
};

NafrBatch make_nafr_batch(const counterfactual::Pipeline& p, const DatasetSplit& test, std::size_t sources,
                          const std::vector<std::size_t>& comps, std::uint64_t seed) {
    NafrBatch b;
    counterfactual::Batch batch;
    batch.images = first_rows(test.images(), sources);
    b.sources = batch.images;
    counterfactual::GenerationOptions opts;
    opts.seed = seed;
    const auto res = counterfactual::generate_reflections(p, batch, comps, opts);
    b.images = Matrix(res.records.size(), squares::kPixels);
    for (std::size_t r = 0; r < res.records.size(); ++r) {
        const auto& rec = res.records[r];
        b.images.set_row(r, rec.image);
        b.source_index.push_back(rec.source_index);
        try {
            b.analytic.push_back(squares::analytic_label(rec.image).first);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::ambiguous_image) throw;
            b.analytic.push_back(-1);
            ++b.ambiguous;
        }
    }
    return b;
}

std::pair<double, double> nafr_pair(const models::MlpModel& f, const models::MlpModel& o, const NafrBatch& b) {
    const auto src = models::predict_classes(f, b.sources);
    std::vector<int> yt;
    for (auto i : b.source_index) yt.push_back(metrics::target_label(src[i]));
    const auto fp = models::predict_classes(f, b.images);
    const auto op = models::predict_classes(o, b.images);
    return {metrics::nafr(fp, op, yt), metrics::nafr(fp, b.analytic, yt)};
}

metrics::GroupAccuracy student_accuracy(const models::MlpModel& f, const DatasetSplit& test) {
    return metrics::aga(models::predict_classes(f, test.images()), test.labels(), test.attributes());
}

std::optional<metrics::EvaluationReport> correction_report(const RunConfig& cfg, const fs::path& path,
                                                           StageOutput& out) {
    if (!fs::exists(path)) return std::nullopt;
    auto rep = metrics::read_report(path);
    metrics::check_digest(rep, stage_digest(cfg, Stage::correction));
    out.add_input(path, rep.config_digest);
    return rep;
}

}  // namespace

void cmd_eval(const RunConfig& cfg, std::ostream& log) {
    const Layout lay(cfg.output_dir());
    StageOutput out(cfg, lay.root / "eval");
    const auto enc = load_model(lay.encoder(), cfg, Stage::encoder, "train-encoder", &out);
    const auto dm = load_decoder(cfg, &out);
    const auto d = load_dict(cfg, &out);
    counterfactual::Pipeline p{&enc, &dm, &d, inversion_options(cfg)};
    const auto comps = resolve_components(d, cfg.list("eval.nafr_components"));
    const std::string probe_cfkd = std::string("cfkd-probe-") + cfg.str("probe.injection");

    metrics::EvaluationReport report;
    report.config_digest = config_digest(cfg);
    report.timestamp = report_timestamp();
    report.provenance["workers"] = std::to_string(dm.workers);
    for (auto st : {Stage::data, Stage::encoder, Stage::decoder, Stage::dictionary, Stage::student,
                    Stage::correction})
        report.provenance[std::string("digest_") + to_string(st)] = stage_digest(cfg, st);

    std::size_t ambiguous = 0, nafr_records = 0;
    for (auto s : cfg.seeds()) {
        const auto test = load_split(lay.test_split(s), cfg, &out);
        const auto f = load_model(lay.student(s), cfg, Stage::student, "train-student", &out);
        const auto o = load_model(lay.oracle(s), cfg, Stage::student, "train-student", &out);
        const auto batch = make_nafr_batch(p, test, cfg.count("eval.nafr_sources"), comps, derive_seed(s, "nafr"));
        ambiguous += batch.ambiguous;
        nafr_records = batch.images.rows();

        const auto base = student_accuracy(f, test);
        auto [n_o, n_a] = nafr_pair(f, o, batch);
        auto row = metrics::make_row("student-baseline", s, base);
        row.nafr = n_o;
        report.rows.push_back(row);
        row.name = "student-baseline-analytic";
        row.nafr = n_a;
        report.rows.push_back(row);

        const fs::path cdir = lay.correct_dir("cfkd-student", s);
        if (fs::exists(cdir / "student.ddae")) {
            const auto fc = load_model(cdir / "student.ddae", cfg, Stage::correction, "correct", &out);
            const auto oc = load_model(cdir / "oracle.ddae", cfg, Stage::correction, "correct", &out);
            const auto acc = student_accuracy(fc, test);
            auto [c_o, c_a] = nafr_pair(fc, oc, batch);
            auto crow = metrics::make_row("student-cfkd", s, acc);
            crow.nafr = c_o;
            crow.gain = metrics::gain(base.aga, acc.aga);
            report.rows.push_back(crow);
            crow.name = "student-cfkd-analytic";
            crow.nafr = c_a;
            report.rows.push_back(crow);
        }

        std::optional<double> probe_base;
        if (auto rep = correction_report(cfg, lay.correct_dir("project-probe", s) / "report.csv", out)) {
            for (auto r : rep->rows) {
                if (r.name == "probe-original") probe_base = r.aga;
                report.rows.push_back(r);
            }
        }
        if (auto rep = correction_report(cfg, lay.correct_dir(probe_cfkd, s) / "report.csv", out)) {
            if (!probe_base) probe_base = rep->rows.front().aga;
            auto r = rep->rows.back();
            r.name = "probe-cfkd-" + cfg.str("probe.injection");
            r.gain = metrics::gain(*probe_base, r.aga);
            report.rows.push_back(r);
        }
        log << "seed " << s << ": baseline AGA " << fmt(base.aga) << "\n";
    }
    report.provenance["nafr_records"] = std::to_string(nafr_records);
    report.provenance["nafr_ambiguous"] = std::to_string(ambiguous);
    metrics::write_report(lay.eval_report(), report);
    log << "report written to " << lay.eval_report().string() << "\n";
    out.finish();
}

BenchSummary cmd_bench(const RunConfig& cfg, std::ostream& log) {
    const Layout lay(cfg.output_dir());
    StageOutput out(cfg, lay.root / "bench");
    const auto test = load_split(lay.test_split(cfg.seeds().front()), cfg, &out);
    const auto enc = load_model(lay.encoder(), cfg, Stage::encoder, "train-encoder", &out);
    const auto dm = load_decoder(cfg, &out);
    const auto d = load_dict(cfg, &out);
    counterfactual::Pipeline p{&enc, &dm, &d, inversion_options(cfg)};
    const auto comps = resolve_components(d, cfg.list("bench.components"));
    const Matrix pool = test.images();

    std::string csv =
        "sharing,batch_size,components,workers,counterfactuals_per_second,batch_rates,embed_seconds,invert_seconds,"
        "decode_seconds\n";
    BenchSummary sum;
    for (auto sharing : {counterfactual::InversionSharing::shared, counterfactual::InversionSharing::per_counterfactual}) {
        const auto r = counterfactual::measure_throughput(p, pool, cfg.count("bench.batch_size"), comps, sharing,
                                                          cfg.count("bench.repeats"));
        std::string rates;
        for (double v : r.batch_rates) rates += (rates.empty() ? "" : ";") + fmt(v);
        const char* label = sharing == counterfactual::InversionSharing::shared ? "shared" : "per_counterfactual";
        csv += std::string(label) + "," + std::to_string(r.batch_size) + "," + std::to_string(r.components) + "," +
               std::to_string(r.workers) + "," + fmt(r.counterfactuals_per_second) + "," + rates + "," +
               fmt(r.embed_seconds) + "," + fmt(r.invert_seconds) + "," + fmt(r.decode_seconds) + "\n";
        (sharing == counterfactual::InversionSharing::shared ? sum.shared_rate : sum.per_counterfactual_rate) =
            r.counterfactuals_per_second;
        log << label << ": " << fmt(r.counterfactuals_per_second) << " counterfactuals/s\n";
    }
    sum.speedup = sum.shared_rate / sum.per_counterfactual_rate;
    csv += "# speedup_shared_over_per_counterfactual=" + fmt(sum.speedup) + "\n";
    write_file(lay.bench_report(), csv);
    out.finish();
    return sum;
}

void cmd_run_all(const RunConfig& cfg, std::ostream& log) {
    // Wall-clock seconds per stage, kept apart from the deterministic outputs.
    std::string timings = "stage,seconds\n";
    const auto timed = [&](const char* stage, auto&& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
        timings += std::string(stage) + "," + fmt(dt.count()) + "\n";
    };
    const auto total0 = std::chrono::steady_clock::now();
    timed("gen-data", [&] { cmd_gen_data(cfg, log); });
    timed("train-encoder", [&] { cmd_train_encoder(cfg, log); });
    timed("train-decoder", [&] { cmd_train_decoder(cfg, log); });
    timed("fit-dict", [&] { cmd_fit_dict(cfg, log); });
    timed("train-student", [&] { cmd_train_student(cfg, log); });
    timed("explain-reflect", [&] { cmd_explain(cfg, ExplainAlgo::reflect, log); });
    timed("explain-invert", [&] { cmd_explain(cfg, ExplainAlgo::invert, log); });
    timed("correct-project-probe", [&] { cmd_correct(cfg, Strategy::project, Target::probe, log); });
    timed("correct-cfkd-probe", [&] { cmd_correct(cfg, Strategy::cfkd, Target::probe, log); });
    timed("correct-cfkd-student", [&] { cmd_correct(cfg, Strategy::cfkd, Target::student, log); });
    timed("eval", [&] { cmd_eval(cfg, log); });
    timed("bench", [&] { cmd_bench(cfg, log); });
    const std::chrono::duration<double> total = std::chrono::steady_clock::now() - total0;
    timings += "total," + fmt(total.count()) + "\n";
    write_file(Layout(cfg.output_dir()).root / "timings.csv", timings);
}

}  // namespace ddae::app
