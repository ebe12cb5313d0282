#include "ddae/correction.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "ddae/error.hpp"
#include "ddae/rng.hpp"

namespace ddae::correction {

using dictionary::ConceptRole;

const ConceptEntry& ConceptMap::at(std::size_t k) const {
    if (k >= entries.size())
        fail(ErrorCode::invalid_input, "concept map: component " + std::to_string(k) + " out of range");
    return entries[k];
}

ConceptMap concept_map_from_dictionary(const dictionary::Dictionary& d) {
    ConceptMap map;
    map.entries.resize(d.dim());
    for (std::size_t k = 0; k < d.dim() && k < d.annotations.size(); ++k)
        if (const auto& a = d.annotations[k]) map.entries[k] = ConceptEntry{a->name, a->role, 1};
    return map;
}

void calibrate_flip_rules(ConceptMap& map, const dictionary::Dictionary& d, const Matrix& z, std::span<const int> labels) {
    require(z.rows() == labels.size(), "calibrate_flip_rules: label count mismatch");
    require(map.size() == d.dim(), "calibrate_flip_rules: concept map does not match the dictionary");
    const Matrix c = dictionary::forward_map(d, z);
    for (std::size_t k = 0; k < map.size(); ++k) {
        if (map.entries[k].role != ConceptRole::causal) continue;
        std::size_t pos = 0, pos_ones = 0;
        for (std::size_t i = 0; i < c.rows(); ++i)
            if (c(i, k) > 0.0) {
                ++pos;
                pos_ones += labels[i] == 1;
            }
        if (pos == 0) fail(ErrorCode::degenerate_concepts, "calibrate_flip_rules: component " + std::to_string(k) + " is never positive");
        map.entries[k].positive_label = 2 * pos_ones >= pos ? 1 : 0;
    }
}

// ---- projection -------------------------------------------------------------------

namespace {

Vector unit_direction(std::span<const double> d_spur, std::string* warning) {
    const double n = norm(d_spur);
    if (!(n > 0.0) || !std::isfinite(n)) fail(ErrorCode::invalid_input, "projection direction has zero norm");
    if (warning) {
        warning->clear();
        if (std::abs(n - 1.0) > 1e-6) {
            char buf[96];
            std::snprintf(buf, sizeof buf, "projection direction had norm %.9g; normalized", n);
            *warning = buf;
        }
    }
    Vector u(d_spur.begin(), d_spur.end());
    for (double& v : u) v /= n;
    return u;
}

void project_into(std::span<double> z, std::span<const double> u) {
    const double a = dot(z, u);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] -= a * u[i];
    // one correction pass pins the residual component to rounding level
    const double r = dot(z, u);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] -= r * u[i];
}

}  // namespace

Vector project_embedding(std::span<const double> z, std::span<const double> d_spur, std::string* warning) {
    require(z.size() == d_spur.size(), "project_embedding: dimension mismatch");
    const Vector u = unit_direction(d_spur, warning);
    Vector out(z.begin(), z.end());
    project_into(out, u);
    return out;
}

Matrix project_embeddings(const Matrix& z, std::span<const double> d_spur, std::string* warning) {
    require(z.cols() == d_spur.size(), "project_embeddings: dimension mismatch");
    const Vector u = unit_direction(d_spur, warning);
    Matrix out = z;
    for (std::size_t i = 0; i < out.rows(); ++i) project_into(out.row(i), u);
    return out;
}

models::LinearProbe fit_label_probe(const Matrix& z, std::span<const int> labels, double ridge,
                                    std::span<const double> weights) {
    Vector t(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) t[i] = labels[i] == 1 ? 1.0 : -1.0;
    return models::fit_linear_probe(z, t, ridge, weights);
}

metrics::GroupAccuracy probe_group_accuracy(const models::LinearProbe& probe, const Matrix& z,
                                            const squares::DatasetSplit& split) {
    return metrics::aga(probe.predict(z), split.labels(), split.attributes());
}

metrics::EvaluationReport projected_probe_pipeline(const models::MlpModel& encoder, std::span<const double> d_spur,
                                                   const squares::DatasetSplit& train,
                                                   const squares::DatasetSplit& test, std::uint64_t seed,
                                                   double ridge) {
    const Matrix z_train = models::embed(encoder, train.images());
    const Matrix z_test = models::embed(encoder, test.images());
    const auto labels = train.labels();
    std::string warning;
    const Matrix p_train = project_embeddings(z_train, d_spur, &warning);
    const Matrix p_test = project_embeddings(z_test, d_spur);

    metrics::EvaluationReport report;
    const auto base = probe_group_accuracy(fit_label_probe(z_train, labels, ridge), z_test, test);
    const auto proj = probe_group_accuracy(fit_label_probe(p_train, labels, ridge), p_test, test);
    report.rows.push_back(metrics::make_row("probe-original", seed, base));
    auto row = metrics::make_row("probe-projected", seed, proj);
    if (base.aga < 1.0) row.gain = metrics::gain(base.aga, proj.aga);
    report.rows.push_back(row);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", ridge);
    report.provenance["probe_ridge"] = buf;
    if (!warning.empty()) report.provenance["projection_warning"] = warning;
    return report;
}

// ---- teacher ------------------------------------------------------------------------

int preclustered_teacher_label(const counterfactual::CounterfactualRecord& record, int source_label,
                               const ConceptMap& map, const dictionary::Dictionary& d) {
    const ConceptEntry& e = map.at(record.component_k);
    switch (e.role) {
    case ConceptRole::spurious:
        return source_label;
    case ConceptRole::causal: {
        require(record.z_prime.size() == d.dim(), "teacher: record embedding has the wrong dimension");
        const Vector c = dictionary::forward_map(d, record.z_prime);
        return c[record.component_k] > 0.0 ? e.positive_label : 1 - e.positive_label;
    }
    case ConceptRole::unknown:
        break;
    }
    fail(ErrorCode::unlabeled_component, "component " + std::to_string(record.component_k) + " ('" + e.name +
                                             "') is not annotated causal or spurious");
}

PreclusteredTeacher::PreclusteredTeacher(const ConceptMap& map, const dictionary::Dictionary& d) : map_(&map), dict_(&d) {
    require(map.size() == d.dim(), "teacher: concept map does not match the dictionary");
}

int PreclusteredTeacher::label(const counterfactual::CounterfactualRecord& record, int source_label) {
    const int y = preclustered_teacher_label(record, source_label, *map_, *dict_);
    clusters_.insert(record.component_k);
    return y;
}

// ---- CFKD ----------------------------------------------------------------------------

void validate(const CfkdConfig& cfg, const ConceptMap& map) {
    require(cfg.variants >= 1, "cfkd: counterfactuals per component (K) must be positive");
    require(cfg.subsample >= 1, "cfkd: subsample must be positive");
    require(cfg.augmentation_weight >= 0.0 && std::isfinite(cfg.augmentation_weight),
            "cfkd: augmentation weight must be finite and non-negative");
    require(!cfg.components.empty(), "cfkd: no components selected");
    models::validate(cfg.retrain);
    for (std::size_t k : cfg.components) {
        const ConceptEntry& e = map.at(k);
        if (e.role == ConceptRole::unknown)
            fail(ErrorCode::unlabeled_component,
                 "cfkd: component " + std::to_string(k) + " is not annotated causal or spurious");
    }
}

std::string format_round_log(const std::vector<RoundLog>& rounds) {
    std::ostringstream out;
    out << "round,real_pool,counterfactual_pool,generated,labeled,acc_y0_a0,acc_y0_a1,acc_y1_a0,acc_y1_a1,aga,gain\n";
    char buf[40];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.6f", v);
        return std::string(buf);
    };
    for (const auto& r : rounds) {
        out << r.round << ',' << r.real_pool << ',' << r.counterfactual_pool << ',' << r.generated << ',' << r.labeled;
        for (double a : r.accuracy.accuracy) out << ',' << num(a);
        out << ',' << num(r.accuracy.aga) << ',' << (r.gain ? num(*r.gain) : std::string()) << '\n';
    }
    return out.str();
}

namespace {

std::vector<std::size_t> round_sources(std::size_t n, std::size_t want, std::uint64_t seed, std::size_t round) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    SeededRng rng(derive_seed(derive_seed(seed, "cfkd-round"), round));
    rng.shuffle(idx);
    idx.resize(std::min(n, want));
    std::sort(idx.begin(), idx.end());
    return idx;
}

void stamp_config(metrics::EvaluationReport& report, const CfkdConfig& cfg) {
    std::string comps;
    for (std::size_t k : cfg.components) comps += (comps.empty() ? "" : ",") + std::to_string(k);
    char w[32];
    std::snprintf(w, sizeof w, "%.17g", cfg.augmentation_weight);
    report.provenance["cfkd_rounds"] = std::to_string(cfg.rounds);
    report.provenance["cfkd_variants"] = std::to_string(cfg.variants);
    report.provenance["cfkd_components"] = comps;
    report.provenance["cfkd_augmentation_weight"] = w;
    report.provenance["cfkd_subsample"] = std::to_string(cfg.subsample);
    report.provenance["cfkd_warm_start"] = cfg.warm_start ? "1" : "0";
}

RoundLog make_log(std::size_t round, const metrics::GroupAccuracy& acc, double baseline) {
    RoundLog log;
    log.round = round;
    log.accuracy = acc;
    if (round > 0 && baseline < 1.0) log.gain = metrics::gain(baseline, acc.aga);
    return log;
}

}  // namespace

CfkdResult cfkd_run(const models::MlpModel& student, const counterfactual::Pipeline& pipeline, const ConceptMap& map,
                    const squares::DatasetSplit& train, const squares::DatasetSplit& test, const CfkdConfig& cfg) {
    validate(cfg, map);
    require(pipeline.encoder && pipeline.decoder && pipeline.dictionary, "cfkd: pipeline is missing a model");
    require(map.size() == pipeline.dictionary->dim(), "cfkd: concept map does not match the dictionary");
    require(student.head() == models::TaskHead::binary_classification, "cfkd: student is not a classifier");
    require(train.size() > 0 && test.size() > 0, "cfkd: empty split");

    const Matrix train_images = train.images();
    const Matrix test_images = test.images();
    const auto train_labels = train.labels();
    const auto test_labels = test.labels();
    const auto test_attrs = test.attributes();
    auto evaluate = [&](const models::MlpModel& f) {
        return metrics::aga(models::predict_classes(f, test_images), test_labels, test_attrs);
    };

    CfkdResult res;
    res.student = student;
    stamp_config(res.report, cfg);
    const auto base = evaluate(res.student);
    RoundLog first = make_log(0, base, base.aga);
    first.real_pool = train.size();
    res.rounds.push_back(first);

    PreclusteredTeacher teacher(map, *pipeline.dictionary);
    std::vector<Vector> cf_images;
    std::vector<int> cf_labels;

    for (std::size_t round = 1; round <= cfg.rounds; ++round) {
        RoundLog log;
        try {
            const auto sources = round_sources(train.size(), cfg.subsample, cfg.seed, round);
            counterfactual::Batch batch;
            batch.images = take_rows(train_images, sources);
            batch.indices = sources;
            batch.source_predictions = models::predict_classes(res.student, batch.images);
            counterfactual::GenerationOptions opts;
            opts.variants = cfg.variants;
            opts.seed = derive_seed(derive_seed(cfg.seed, "cfkd-codes"), round);
            const auto gen = counterfactual::generate_reflections(pipeline, batch, cfg.components, opts);

            std::size_t labeled = 0;
            for (const auto& rec : gen.records) {
                cf_labels.push_back(teacher.label(rec, train_labels[rec.source_index]));
                cf_images.push_back(rec.image);
                ++labeled;
            }

            std::vector<std::string> notes = gen.notes;
            if (labeled == 0) {
                notes.push_back("warning: no labeled counterfactuals; round left the student unchanged");
            } else {
                const std::size_t n_real = train.size(), n_cf = cf_images.size();
                Matrix pool(n_real + n_cf, squares::kPixels);
                std::vector<int> labels(train_labels.begin(), train_labels.end());
                Vector weights(n_real, 1.0);
                for (std::size_t i = 0; i < n_real; ++i) pool.set_row(i, train_images.row(i));
                for (std::size_t i = 0; i < n_cf; ++i) {
                    pool.set_row(n_real + i, cf_images[i]);
                    labels.push_back(cf_labels[i]);
                    weights.push_back(cfg.augmentation_weight);
                }
                models::TrainConfig rc = cfg.retrain;
                rc.seed = derive_seed(cfg.retrain.seed, round);
                if (!cfg.warm_start) res.student = models::make_student(derive_seed(rc.seed, "cfkd-scratch"));
                const auto sr = models::fit_classifier(res.student, pool, labels, weights, rc);
                for (const auto& w : sr.warnings) notes.push_back(w);
            }
            log = make_log(round, evaluate(res.student), base.aga);
            log.real_pool = train.size();
            log.counterfactual_pool = cf_images.size();
            log.generated = gen.records.size();
            log.labeled = labeled;
            log.notes = std::move(notes);
        } catch (const Error& e) {
            log = make_log(round, evaluate(res.student), base.aga);
            log.real_pool = train.size();
            log.counterfactual_pool = cf_images.size();
            log.notes.push_back(std::string("round aborted: ") + e.what());
            res.rounds.push_back(log);
            res.completed = false;
            res.abort_reason = e.what();
            break;
        }
        res.rounds.push_back(log);
    }

    for (const auto& r : res.rounds) {
        auto row = metrics::make_row("cfkd-round-" + std::to_string(r.round), cfg.seed, r.accuracy);
        row.gain = r.gain;
        res.report.rows.push_back(row);
    }
    res.labeled_clusters = teacher.labeled_clusters();
    res.report.provenance["cfkd_labeled_clusters"] = std::to_string(res.labeled_clusters);
    return res;
}

const char* to_string(InjectionMode mode) { return mode == InjectionMode::embedding ? "embedding" : "pixel"; }

InjectionMode parse_injection_mode(std::string_view text) {
    if (text == "embedding") return InjectionMode::embedding;
    if (text == "pixel") return InjectionMode::pixel;
    fail(ErrorCode::invalid_input, "unknown injection mode '" + std::string(text) + "' (expected embedding|pixel)");
}

ProbeCfkdResult foundation_probe_cfkd(const counterfactual::Pipeline& pipeline, const ConceptMap& map,
                                      const squares::DatasetSplit& train, const squares::DatasetSplit& test,
                                      const CfkdConfig& cfg, InjectionMode mode, double ridge) {
    validate(cfg, map);
    require(pipeline.encoder && pipeline.dictionary, "probe cfkd: pipeline is missing a model");
    require(mode == InjectionMode::embedding || pipeline.decoder, "probe cfkd: pixel mode needs a decoder");
    const dictionary::Dictionary& d = *pipeline.dictionary;
    require(map.size() == d.dim(), "probe cfkd: concept map does not match the dictionary");

    const Matrix train_images = train.images();
    const Matrix z_train = models::embed(*pipeline.encoder, train_images);
    const Matrix z_test = models::embed(*pipeline.encoder, test.images());
    const auto train_labels = train.labels();

    ProbeCfkdResult res;
    res.mode = mode;
    stamp_config(res.report, cfg);
    res.report.provenance["probe_injection"] = to_string(mode);
    res.probe = fit_label_probe(z_train, train_labels, ridge);
    const auto base = probe_group_accuracy(res.probe, z_test, test);
    RoundLog first = make_log(0, base, base.aga);
    first.real_pool = train.size();
    res.rounds.push_back(first);

    PreclusteredTeacher teacher(map, d);
    std::vector<Vector> cf_z;
    std::vector<int> cf_labels;

    for (std::size_t round = 1; round <= cfg.rounds; ++round) {
        RoundLog log;
        try {
            const auto sources = round_sources(train.size(), cfg.subsample, cfg.seed, round);
            std::vector<counterfactual::CounterfactualRecord> records;
            std::vector<std::string> notes;
            if (mode == InjectionMode::embedding) {
                for (std::size_t k : cfg.components)
                    for (std::size_t i : sources) {
                        counterfactual::CounterfactualRecord r;
                        r.source_index = i;
                        r.component_k = k;
                        r.z_prime = counterfactual::reflect_component(d, z_train.row(i), k);
                        records.push_back(std::move(r));
                    }
            } else {
                counterfactual::Batch batch;
                batch.images = take_rows(train_images, sources);
                batch.indices = sources;
                counterfactual::GenerationOptions opts;
                opts.variants = cfg.variants;
                opts.seed = derive_seed(derive_seed(cfg.seed, "probe-cfkd-codes"), round);
                auto gen = counterfactual::generate_reflections(pipeline, batch, cfg.components, opts);
                notes = gen.notes;
                records = std::move(gen.records);
                Matrix images(records.size(), squares::kPixels);
                for (std::size_t i = 0; i < records.size(); ++i) images.set_row(i, records[i].image);
                if (!records.empty()) {
                    const Matrix re = models::embed(*pipeline.encoder, images);
                    for (std::size_t i = 0; i < records.size(); ++i) {
                        const auto row = re.row(i);
                        records[i].z_prime.assign(row.begin(), row.end());
                    }
                }
            }
            // labels come from the edit, not from the re-embedded image
            for (auto& r : records) {
                if (mode == InjectionMode::pixel) {
                    const Vector edited = counterfactual::reflect_component(d, z_train.row(r.source_index), r.component_k);
                    counterfactual::CounterfactualRecord tmp = r;
                    tmp.z_prime = edited;
                    cf_labels.push_back(teacher.label(tmp, train_labels[r.source_index]));
                } else {
                    cf_labels.push_back(teacher.label(r, train_labels[r.source_index]));
                }
                cf_z.push_back(r.z_prime);
            }
            if (records.empty()) {
                notes.push_back("warning: no labeled counterfactuals; round left the probe unchanged");
            } else {
                const std::size_t n_real = train.size(), n_cf = cf_z.size();
                Matrix pool(n_real + n_cf, d.dim());
                std::vector<int> labels(train_labels.begin(), train_labels.end());
                Vector weights(n_real, 1.0);
                for (std::size_t i = 0; i < n_real; ++i) pool.set_row(i, z_train.row(i));
                for (std::size_t i = 0; i < n_cf; ++i) {
                    pool.set_row(n_real + i, cf_z[i]);
                    labels.push_back(cf_labels[i]);
                    weights.push_back(cfg.augmentation_weight);
                }
                res.probe = fit_label_probe(pool, labels, ridge, weights);
            }
            log = make_log(round, probe_group_accuracy(res.probe, z_test, test), base.aga);
            log.real_pool = train.size();
            log.counterfactual_pool = cf_z.size();
            log.generated = records.size();
            log.labeled = records.size();
            log.notes = std::move(notes);
        } catch (const Error& e) {
            log = make_log(round, probe_group_accuracy(res.probe, z_test, test), base.aga);
            log.real_pool = train.size();
            log.counterfactual_pool = cf_z.size();
            log.notes.push_back(std::string("round aborted: ") + e.what());
            res.rounds.push_back(log);
            res.completed = false;
            res.abort_reason = e.what();
            break;
        }
        res.rounds.push_back(log);
    }

    for (const auto& r : res.rounds) {
        auto row = metrics::make_row(std::string("probe-cfkd-") + to_string(mode) + "-round-" + std::to_string(r.round),
                                     cfg.seed, r.accuracy);
        row.gain = r.gain;
        res.report.rows.push_back(row);
    }
    res.labeled_clusters = teacher.labeled_clusters();
    res.report.provenance["cfkd_labeled_clusters"] = std::to_string(res.labeled_clusters);
    return res;
}

}  // namespace ddae::correction
