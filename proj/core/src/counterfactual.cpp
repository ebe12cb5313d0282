#include "ddae/counterfactual.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "ddae/container.hpp"
#include "ddae/error.hpp"
#include "ddae/rng.hpp"

namespace ddae::counterfactual {

const char* to_string(Method m) { return m == Method::reflection ? "reflection" : "boundary-inversion"; }

Vector reflect_component(const dictionary::Dictionary& d, std::span<const double> z, std::size_t k) {
    if (k >= d.dim())
        fail(ErrorCode::invalid_input, "reflect_component: component " + std::to_string(k) + " out of range");
    Vector c = dictionary::forward_map(d, z);
    c[k] = -c[k];
    return dictionary::inverse_map(d, c);
}

BoundaryStep invert_boundary(const dictionary::Dictionary& d, const models::LinearProbe& probe,
                             std::span<const double> z, std::size_t k) {
    if (k >= d.dim())
        fail(ErrorCode::invalid_input, "invert_boundary: component " + std::to_string(k) + " out of range");
    require(probe.w.size() == d.dim() && z.size() == d.dim(), "invert_boundary: dimension mismatch");
    const Vector v = d.direction(k);
    const double denom = dot(probe.w, v);
    if (!(std::abs(denom) > kParallelThreshold))
        fail(ErrorCode::component_parallel,
             "component " + std::to_string(k) + " is parallel to the probe boundary (w.v = " + std::to_string(denom) + ")");
    BoundaryStep step;
    step.score_before = probe.score(z);
    step.alpha = -2.0 * step.score_before / denom;
    step.z_prime.assign(z.begin(), z.end());
    for (std::size_t i = 0; i < v.size(); ++i) step.z_prime[i] += step.alpha * v[i];
    step.score_after = probe.score(step.z_prime);
    return step;
}

std::vector<std::size_t> default_components(const dictionary::Dictionary& d) {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < d.annotations.size(); ++k)
        if (d.annotations[k]) out.push_back(k);
    return out;
}

namespace {

void check_pipeline(const Pipeline& p) {
    require(p.encoder && p.decoder && p.dictionary, "counterfactual pipeline is missing a model");
    require(p.decoder->cond_dim == p.dictionary->dim(), "decoder conditioning width differs from dictionary dimension");
}

struct Prepared {
    Matrix z;
    Matrix codes;
    std::vector<std::size_t> indices;
};

Prepared prepare(const Pipeline& p, const Batch& batch, GenerationResult& out) {
    check_pipeline(p);
    require(batch.images.cols() == squares::kPixels, "counterfactual batch: expected 256-pixel rows");
    const std::size_t n = batch.images.rows();
    require(batch.indices.empty() || batch.indices.size() == n, "counterfactual batch: one index per image");
    require(batch.source_predictions.empty() || batch.source_predictions.size() == n,
            "counterfactual batch: one prediction per image");
    Prepared prep;
    prep.indices = batch.indices;
    if (prep.indices.empty())
        for (std::size_t i = 0; i < n; ++i) prep.indices.push_back(i);
    prep.z = models::embed(*p.encoder, batch.images);
    prep.codes = diffusion::ddim_invert(*p.decoder, batch.images, prep.z, p.inversion);
    out.inversions += n;
    out.reconstructions = diffusion::ddim_sample(*p.decoder, prep.z, prep.codes);
    out.decodes += n;
    out.codes = prep.codes;
    return prep;
}

Matrix fresh_codes(const std::vector<std::size_t>& indices, std::uint64_t seed, std::size_t variant) {
    Matrix codes(indices.size(), squares::kPixels);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        SeededRng rng(derive_seed(derive_seed(seed, indices[i]), variant));
        for (double& v : codes.row(i)) v = rng.normal();
    }
    return codes;
}

// Decode the edited embeddings of one component for every variant, appending records.
void decode_component(const Pipeline& p, const Prepared& prep, const Batch& batch, std::size_t k,
                      std::vector<CounterfactualRecord> templates, const std::vector<std::size_t>& rows,
                      const GenerationOptions& options, GenerationResult& out) {
    if (rows.empty()) return;
    Matrix zp(rows.size(), prep.z.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) zp.set_row(i, templates[i].z_prime);
    std::vector<std::size_t> src_idx(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) src_idx[i] = prep.indices[rows[i]];
    for (std::size_t j = 0; j < std::max<std::size_t>(options.variants, 1); ++j) {
        const Matrix codes = j == 0 ? take_rows(prep.codes, rows) : fresh_codes(src_idx, options.seed, j);
        Matrix images;
        try {
            images = diffusion::decode_counterfactual(*p.decoder, zp, codes);
        } catch (const Error& e) {
            out.notes.push_back("component " + std::to_string(k) + " variant " + std::to_string(j) +
                                ": decode failed: " + e.what());
            continue;
        }
        out.decodes += rows.size();
        for (std::size_t i = 0; i < rows.size(); ++i) {
            CounterfactualRecord r = templates[i];
            r.variant = j;
            const auto img = images.row(i);
            r.image.assign(img.begin(), img.end());
            out.records.push_back(std::move(r));
        }
    }
    (void)batch;
}

int target_for(const Batch& batch, std::size_t row) {
    return batch.source_predictions.empty() ? -1 : 1 - batch.source_predictions[row];
}

void check_components(const dictionary::Dictionary& d, const std::vector<std::size_t>& components) {
    for (std::size_t k : components)
        if (k >= d.dim())
            fail(ErrorCode::invalid_input, "component " + std::to_string(k) + " out of range for dimension " +
                                               std::to_string(d.dim()));
}

}  // namespace

GenerationResult generate_reflections(const Pipeline& p, const Batch& batch, const std::vector<std::size_t>& components,
                                      const GenerationOptions& options, const models::LinearProbe* probe) {
    const std::uint64_t ledger0 = models::GradientLedger::backward_pass_count();
    check_pipeline(p);
    check_components(*p.dictionary, components);
    GenerationResult out;
    const Prepared prep = prepare(p, batch, out);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    std::vector<std::size_t> rows(prep.z.rows());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    for (std::size_t k : components) {
        std::vector<CounterfactualRecord> templates;
        for (std::size_t i : rows) {
            CounterfactualRecord r;
            r.source_index = prep.indices[i];
            r.component_k = k;
            r.method = Method::reflection;
            r.z_prime = reflect_component(*p.dictionary, prep.z.row(i), k);
            r.probe_score_before = probe ? probe->score(prep.z.row(i)) : nan;
            r.probe_score_after = probe ? probe->score(r.z_prime) : nan;
            r.target_label = target_for(batch, i);
            templates.push_back(std::move(r));
        }
        decode_component(p, prep, batch, k, std::move(templates), rows, options, out);
    }
    out.backward_passes = models::GradientLedger::backward_pass_count() - ledger0;
    return out;
}

GenerationResult generate_inversions(const Pipeline& p, const models::LinearProbe& probe, const Batch& batch,
                                     const std::vector<std::size_t>& components, const GenerationOptions& options) {
    const std::uint64_t ledger0 = models::GradientLedger::backward_pass_count();
    check_pipeline(p);
    check_components(*p.dictionary, components);
    require(probe.w.size() == p.dictionary->dim(), "generate_inversions: probe dimension mismatch");
    GenerationResult out;
    const Prepared prep = prepare(p, batch, out);
    for (std::size_t k : components) {
        std::vector<CounterfactualRecord> templates;
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < prep.z.rows(); ++i) {
            BoundaryStep step;
            try {
                step = invert_boundary(*p.dictionary, probe, prep.z.row(i), k);
            } catch (const Error& e) {
                if (e.code() != ErrorCode::component_parallel) throw;
                out.notes.push_back("component " + std::to_string(k) + " skipped: " + e.what());
                break;  // the direction is shared by every sample
            }
            CounterfactualRecord r;
            r.source_index = prep.indices[i];
            r.component_k = k;
            r.method = Method::boundary_inversion;
            r.alpha = step.alpha;
            r.z_prime = std::move(step.z_prime);
            r.probe_score_before = step.score_before;
            r.probe_score_after = step.score_after;
            r.target_label = batch.source_predictions.empty() ? (step.score_before > 0.0 ? 0 : 1) : target_for(batch, i);
            templates.push_back(std::move(r));
            rows.push_back(i);
        }
        decode_component(p, prep, batch, k, std::move(templates), rows, options, out);
    }
    out.backward_passes = models::GradientLedger::backward_pass_count() - ledger0;
    return out;
}

// ---- throughput ------------------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct StageTimes {
    double embed = 0.0, invert = 0.0, decode = 0.0;
};

Matrix reflect_rows(const dictionary::Dictionary& d, const Matrix& z, std::size_t k) {
    Matrix out(z.rows(), z.cols());
    for (std::size_t i = 0; i < z.rows(); ++i) out.set_row(i, reflect_component(d, z.row(i), k));
    return out;
}

StageTimes run_batch(const Pipeline& p, const Matrix& images, const std::vector<std::size_t>& components,
                     InversionSharing sharing) {
    StageTimes t;
    if (sharing == InversionSharing::shared) {
        auto t0 = Clock::now();
        const Matrix z = models::embed(*p.encoder, images);
        t.embed += seconds_since(t0);
        t0 = Clock::now();
        const Matrix codes = diffusion::ddim_invert(*p.decoder, images, z, p.inversion);
        t.invert += seconds_since(t0);
        for (std::size_t k : components) {
            t0 = Clock::now();
            diffusion::decode_counterfactual(*p.decoder, reflect_rows(*p.dictionary, z, k), codes);
            t.decode += seconds_since(t0);
        }
    } else {
        for (std::size_t k : components) {
            auto t0 = Clock::now();
            const Matrix z = models::embed(*p.encoder, images);
            t.embed += seconds_since(t0);
            t0 = Clock::now();
            const Matrix codes = diffusion::ddim_invert(*p.decoder, images, z, p.inversion);
            t.invert += seconds_since(t0);
            t0 = Clock::now();
            diffusion::decode_counterfactual(*p.decoder, reflect_rows(*p.dictionary, z, k), codes);
            t.decode += seconds_since(t0);
        }
    }
    return t;
}

}  // namespace

ThroughputReport measure_throughput(const Pipeline& p, const Matrix& pool, std::size_t batch_size,
                                    const std::vector<std::size_t>& components, InversionSharing sharing,
                                    std::size_t repeats) {
    check_pipeline(p);
    check_components(*p.dictionary, components);
    require(batch_size >= 1, "measure_throughput: batch size must be positive");
    require(!components.empty(), "measure_throughput: need at least one component");
    require(repeats >= 1, "measure_throughput: need at least one timed batch");
    require(pool.rows() >= 1 && pool.cols() == squares::kPixels, "measure_throughput: empty image pool");

    ThroughputReport rep;
    rep.batch_size = batch_size;
    rep.components = components.size();
    rep.workers = p.decoder->workers;
    rep.sharing = sharing;

    std::size_t next_row = 0;
    auto next_batch = [&] {
        std::vector<std::size_t> idx(batch_size);
        for (auto& i : idx) i = next_row++ % pool.rows();
        return take_rows(pool, idx);
    };

    const std::size_t max_attempts = repeats + 2;
    bool warmed = false;
    for (std::size_t attempt = 0; rep.batch_rates.size() < repeats && attempt <= max_attempts; ++attempt) {
        const Matrix images = next_batch();
        try {
            const auto t0 = Clock::now();
            const StageTimes st = run_batch(p, images, components, sharing);
            const double elapsed = seconds_since(t0);
            if (!warmed) {
                warmed = true;  // discarded
                continue;
            }
            if (!(elapsed > 0.0)) fail(ErrorCode::measurement_failure, "batch finished in zero measurable time");
            rep.batch_rates.push_back(static_cast<double>(batch_size * components.size()) / elapsed);
            rep.embed_seconds += st.embed;
            rep.invert_seconds += st.invert;
            rep.decode_seconds += st.decode;
        } catch (const Error& e) {
            rep.notes.push_back("batch " + std::to_string(attempt) + " excluded: " + e.what());
        }
    }
    if (rep.batch_rates.size() < repeats)
        fail(ErrorCode::measurement_failure, "only " + std::to_string(rep.batch_rates.size()) + " of " +
                                                 std::to_string(repeats) + " timed batches succeeded");
    double sum = 0.0;
    for (double r : rep.batch_rates) sum += r;
    rep.counterfactuals_per_second = sum / static_cast<double>(rep.batch_rates.size());
    return rep;
}

// ---- export -------------------------------------------------------------------------

std::string format_pgm(std::span<const double> image) {
    require(image.size() == squares::kPixels, "format_pgm: expected a 16x16 image");
    std::string out = "P5\n16 16\n255\n";
    for (double v : image) {
        const double c = std::clamp(v, 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
    }
    return out;
}

void write_pgm(const std::filesystem::path& path, std::span<const double> image) { write_file(path, format_pgm(image)); }

namespace {

std::string cell(double v) {
    if (std::isnan(v)) return "";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::filesystem::path export_records(const std::filesystem::path& dir, const std::vector<CounterfactualRecord>& records) {
    std::filesystem::create_directories(dir / "images");
    std::ostringstream csv;
    csv << "source_index,k,method,variant,alpha,score_before,score_after,y_t,image\n";
    for (const auto& r : records) {
        const std::string name = "cf_" + std::to_string(r.source_index) + "_k" + std::to_string(r.component_k) + "_v" +
                                 std::to_string(r.variant) + (r.method == Method::reflection ? "_ref" : "_inv") + ".pgm";
        write_pgm(dir / "images" / name, r.image);
        csv << r.source_index << ',' << r.component_k << ',' << to_string(r.method) << ',' << r.variant << ','
            << (r.method == Method::boundary_inversion ? cell(r.alpha) : std::string()) << ','
            << cell(r.probe_score_before) << ',' << cell(r.probe_score_after) << ',' << r.target_label << ",images/"
            << name << '\n';
    }
    const auto manifest = dir / "manifest.csv";
    write_file(manifest, csv.str());
    return manifest;
}

}  // namespace ddae::counterfactual
