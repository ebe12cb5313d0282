#include "ddae/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

#include "ddae/error.hpp"
#include "ddae/parallel.hpp"
#include "ddae/rng.hpp"

namespace ddae::diffusion {

using models::MlpModel;

void validate(const ScheduleConfig& cfg) {
    require(cfg.steps >= 1, "schedule: steps must be >= 1");
    require(cfg.base_steps >= cfg.steps, "schedule: base_steps must be >= steps");
    require(cfg.base_steps % cfg.steps == 0, "schedule: base_steps must be a multiple of steps");
    require(cfg.beta_start > 0.0 && cfg.beta_end < 1.0 && cfg.beta_start <= cfg.beta_end,
            "schedule: need 0 < beta_start <= beta_end < 1");
}

NoiseSchedule NoiseSchedule::make(const ScheduleConfig& cfg) {
    validate(cfg);
    NoiseSchedule s;
    s.config = cfg;
    const std::size_t stride = cfg.base_steps / cfg.steps;
    double abar = 1.0;
    for (std::size_t i = 0; i < cfg.base_steps; ++i) {
        const double frac = cfg.base_steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(cfg.base_steps - 1);
        abar *= 1.0 - (cfg.beta_start + frac * (cfg.beta_end - cfg.beta_start));
        if ((i + 1) % stride == 0) {
            const double prev = s.alpha_bars.empty() ? 1.0 : s.alpha_bars.back();
            s.betas.push_back(1.0 - abar / prev);
            s.alpha_bars.push_back(abar);
            s.timestep.push_back(i);
        }
    }
    return s;
}

Vector time_embedding(std::size_t timestep) {
    constexpr std::size_t half = kTimeEmbedWidth / 2;
    Vector e(kTimeEmbedWidth);
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        const double arg = static_cast<double>(timestep) * freq;
        e[i] = std::sin(arg);
        e[half + i] = std::cos(arg);
    }
    return e;
}

namespace {

Matrix to_signed(const Matrix& images) {
    Matrix x = images;
    for (double& v : x.data()) v = 2.0 * v - 1.0;
    return x;
}

Matrix to_pixels(const Matrix& x) {
    Matrix img = x;
    for (double& v : img.data()) v = std::clamp(0.5 * (v + 1.0), 0.0, 1.0);
    return img;
}

// Network input rows [u_t | emb(t_r) | phi]
Matrix assemble(const Matrix& u_t, const std::vector<const Vector*>& emb, const Matrix& phi) {
    const std::size_t px = u_t.cols(), f = phi.cols();
    Matrix in(u_t.rows(), px + kTimeEmbedWidth + f);
    for (std::size_t r = 0; r < u_t.rows(); ++r) {
        auto row = in.row(r);
        std::copy_n(u_t.row(r).begin(), px, row.begin());
        std::copy_n(emb[r]->begin(), kTimeEmbedWidth, row.begin() + px);
        std::copy_n(phi.row(r).begin(), f, row.begin() + px + kTimeEmbedWidth);
    }
    return in;
}

void check_finite(const Matrix& x, const char* op, std::size_t level) {
    if (!x.all_finite())
        fail(ErrorCode::numerical_failure, std::string(op) + ": non-finite values at step " + std::to_string(level));
}

void check_batch(const DenoiserModel& model, const Matrix& x, const Matrix& z, const char* op) {
    require(x.cols() == squares::kPixels, std::string(op) + ": expected 256-pixel rows");
    require(z.rows() == x.rows(), std::string(op) + ": z and image row counts differ");
    require(z.cols() == model.cond_dim, std::string(op) + ": conditioning width mismatch");
}

Matrix signed_mean(const DenoiserModel& model, const Matrix& phi) { return model.renderer.forward(phi); }

Matrix predict_from_features(const DenoiserModel& model, const Matrix& u_t, std::size_t t, const Matrix& phi) {
    require(t < model.schedule.steps(), "predict_noise: step out of range");
    const Vector emb = time_embedding(model.schedule.timestep[t]);
    const double ab = model.schedule.alpha_bars[t];
    const double skip = std::sqrt(1.0 - ab), scale = std::sqrt(ab);
    Matrix eps(u_t.rows(), u_t.cols());
    parallel_chunks(u_t.rows(), model.workers, [&](std::size_t begin, std::size_t end) {
        const bool whole = begin == 0 && end == u_t.rows();
        std::vector<std::size_t> idx(end - begin);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
        const Matrix us = whole ? u_t : take_rows(u_t, idx);
        const Matrix ps = whole ? phi : take_rows(phi, idx);
        const std::vector<const Vector*> embs(idx.size(), &emb);
        const Matrix r = model.net.forward(assemble(us, embs, ps));
        for (std::size_t i = 0; i < idx.size(); ++i) {
            auto out = eps.row(begin + i);
            const auto ur = us.row(i);
            const auto rr = r.row(i);
            for (std::size_t p = 0; p < out.size(); ++p) out[p] = skip * ur[p] + scale * rr[p];
        }
    });
    return eps;
}

std::vector<std::size_t> iota_rows(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

}  // namespace

Matrix DenoiserModel::features(const Matrix& z) const {
    require(z.cols() == cond_dim && frequencies.rows() == cond_dim, "features: conditioning width mismatch");
    const Matrix zb = matmul(z, frequencies);
    const std::size_t f = frequencies.cols();
    Matrix phi(z.rows(), 2 * f);
    for (std::size_t i = 0; i < z.rows(); ++i)
        for (std::size_t j = 0; j < f; ++j) {
            phi(i, j) = std::sin(zb(i, j));
            phi(i, f + j) = std::cos(zb(i, j));
        }
    return phi;
}

Matrix DenoiserModel::render_mean(const Matrix& z) const {
    Matrix m = signed_mean(*this, features(z));
    for (double& v : m.data()) v = 0.5 * (v + 1.0);
    return m;
}

Matrix DenoiserModel::predict_noise(const Matrix& u_t, std::size_t t, const Matrix& z) const {
    require(u_t.rows() == z.rows(), "predict_noise: row count mismatch");
    return predict_from_features(*this, u_t, t, features(z));
}

DenoiserModel make_denoiser(const ScheduleConfig& schedule, std::size_t cond_dim, std::uint64_t init_seed) {
    require(cond_dim >= 1, "make_denoiser: conditioning width must be positive");
    DenoiserModel m;
    m.schedule = NoiseSchedule::make(schedule);
    m.cond_dim = cond_dim;
    SeededRng rng(derive_seed(init_seed, "fourier"));
    m.frequencies = Matrix(cond_dim, kFourierFrequencies);
    for (double& v : m.frequencies.data()) v = kFourierScale * rng.normal();
    m.frequencies = quantize_f32(m.frequencies);
    const std::size_t f = 2 * kFourierFrequencies;
    m.renderer = MlpModel({f, kHiddenWidth, kHiddenWidth, squares::kPixels}, models::TaskHead::regression,
                          derive_seed(init_seed, "renderer"));
    m.net = MlpModel({squares::kPixels + kTimeEmbedWidth + f, kHiddenWidth, kHiddenWidth, squares::kPixels},
                     models::TaskHead::regression, derive_seed(init_seed, "noise-net"));
    return m;
}

double denoising_loss(const DenoiserModel& model, const Matrix& images, const Matrix& z, std::uint64_t seed) {
    check_batch(model, images, z, "denoising_loss");
    const Matrix phi = model.features(z);
    Matrix u0 = to_signed(images);
    const Matrix mean = signed_mean(model, phi);
    for (std::size_t i = 0; i < u0.size(); ++i) u0.data()[i] = (u0.data()[i] - mean.data()[i]) / model.residual_scale;
    const std::size_t steps = model.schedule.steps();
    SeededRng rng(seed);
    std::vector<std::size_t> level(u0.rows());
    Matrix eps(u0.rows(), u0.cols());
    for (std::size_t r = 0; r < u0.rows(); ++r) {
        level[r] = rng.below(steps);
        for (double& v : eps.row(r)) v = rng.normal();
    }
    double sum = 0.0;
    for (std::size_t t = 0; t < steps; ++t) {
        std::vector<std::size_t> rows;
        for (std::size_t r = 0; r < level.size(); ++r)
            if (level[r] == t) rows.push_back(r);
        if (rows.empty()) continue;
        const double ab = model.schedule.alpha_bars[t];
        Matrix ut = take_rows(u0, rows);
        const Matrix e = take_rows(eps, rows);
        for (std::size_t i = 0; i < ut.size(); ++i)
            ut.data()[i] = std::sqrt(ab) * ut.data()[i] + std::sqrt(1.0 - ab) * e.data()[i];
        const Matrix pred = predict_from_features(model, ut, t, take_rows(phi, rows));
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const double d = pred.data()[i] - e.data()[i];
            sum += d * d;
        }
    }
    return u0.empty() ? 0.0 : sum / static_cast<double>(u0.size());
}

namespace {

void check_decreasing(const std::vector<double>& losses, const char* what) {
    const std::size_t window = std::min<std::size_t>(5, losses.size() / 2);
    if (window == 0) return;
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < window; ++i) {
        first += losses[i];
        last += losses[losses.size() - 1 - i];
    }
    if (last >= first) {
        std::ostringstream msg;
        msg << what << ": loss did not decrease (first " << window << " epochs " << first / window << ", last "
            << last / window << ")";
        fail(ErrorCode::training_failure, msg.str());
    }
}

void fit_renderer(DenoiserModel& model, const Matrix& phi, const Matrix& x0, const models::TrainConfig& cfg,
                  DenoiserReport& rep) {
    models::AdamOptimizer adam(model.renderer);
    SeededRng rng(derive_seed(cfg.seed, "renderer-batches"));
    std::vector<std::size_t> order = iota_rows(x0.rows());
    const double total = static_cast<double>(cfg.epochs * order.size());
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::span<const std::size_t> idx(order.data() + start, end - start);
            const models::ForwardTrace trace = models::forward_trace(model.renderer, take_rows(phi, idx));
            Matrix d;
            epoch_loss += models::mse_loss(trace.output(), take_rows(x0, idx), d);
            ++batches;
            const double progress = (static_cast<double>(epoch * order.size() + start)) / total;
            adam.step(model.renderer, models::backward(model.renderer, trace, d),
                      models::cosine_learning_rate(cfg.learning_rate, progress));
        }
        // signed units are twice pixel units
        rep.renderer_epoch_loss.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(batches, 1)) / 4.0);
        if (!std::isfinite(rep.renderer_epoch_loss.back()))
            fail(ErrorCode::training_failure, "train_denoiser: renderer loss diverged at epoch " + std::to_string(epoch));
    }
    model.renderer.quantize();
    check_decreasing(rep.renderer_epoch_loss, "train_denoiser (renderer)");
}

void fit_noise_net(DenoiserModel& model, const Matrix& phi, const Matrix& u0, const models::TrainConfig& cfg,
                   DenoiserReport& rep) {
    const NoiseSchedule& sched = model.schedule;
    const std::size_t steps = sched.steps();
    std::vector<Vector> embs;
    for (std::size_t t = 0; t < steps; ++t) embs.push_back(time_embedding(sched.timestep[t]));

    models::AdamOptimizer adam(model.net);
    SeededRng rng(derive_seed(cfg.seed, "denoiser-batches"));
    std::vector<std::size_t> order = iota_rows(u0.rows());
    const std::size_t px = squares::kPixels;
    const double total = static_cast<double>(cfg.epochs * order.size());
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const std::size_t b = end - start;
            std::span<const std::size_t> idx(order.data() + start, b);
            Matrix ut = take_rows(u0, idx);
            Matrix eps(b, px);
            std::vector<const Vector*> emb(b);
            Vector skip(b), scale(b);
            for (std::size_t r = 0; r < b; ++r) {
                const std::size_t t = rng.below(steps);
                const double ab = sched.alpha_bars[t];
                emb[r] = &embs[t];
                skip[r] = std::sqrt(1.0 - ab);
                scale[r] = std::sqrt(ab);
                auto u = ut.row(r);
                auto e = eps.row(r);
                for (std::size_t p = 0; p < px; ++p) {
                    e[p] = rng.normal();
                    u[p] = scale[r] * u[p] + skip[r] * e[p];
                }
            }
            const models::ForwardTrace trace = models::forward_trace(model.net, assemble(ut, emb, take_rows(phi, idx)));
            const Matrix& out = trace.output();
            Matrix d(b, px);
            double loss = 0.0;
            for (std::size_t r = 0; r < b; ++r) {
                const auto o = out.row(r);
                const auto u = ut.row(r);
                const auto e = eps.row(r);
                auto dr = d.row(r);
                for (std::size_t p = 0; p < px; ++p) {
                    const double diff = skip[r] * u[p] + scale[r] * o[p] - e[p];
                    loss += diff * diff;
                    // eps error weighted by 1 / abar, i.e. a plain MSE on the network output
                    dr[p] = diff / scale[r] / static_cast<double>(b);
                }
            }
            epoch_loss += loss / static_cast<double>(b * px);
            ++batches;
            const double progress = (static_cast<double>(epoch * order.size() + start)) / total;
            adam.step(model.net, models::backward(model.net, trace, d),
                      models::cosine_learning_rate(cfg.learning_rate, progress));
        }
        rep.epoch_loss.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(batches, 1)));
        if (!std::isfinite(rep.epoch_loss.back()))
            fail(ErrorCode::training_failure, "train_denoiser: loss diverged at epoch " + std::to_string(epoch));
    }
    model.net.quantize();
    check_decreasing(rep.epoch_loss, "train_denoiser");
}

}  // namespace

DenoiserModel train_denoiser(const squares::DatasetSplit& train, const MlpModel& encoder,
                             const models::TrainConfig& cfg, const models::TrainConfig& renderer_cfg,
                             const ScheduleConfig& schedule_cfg, DenoiserReport* report) {
    models::validate(cfg);
    models::validate(renderer_cfg);
    if (train.size() == 0) fail(ErrorCode::invalid_input, "train_denoiser: empty training split");
    const Matrix images = train.images();
    const Matrix z = models::embed(encoder, images);
    const Matrix x0 = to_signed(images);
    DenoiserModel model = make_denoiser(schedule_cfg, z.cols(), derive_seed(cfg.seed, "denoiser"));
    const Matrix phi = model.features(z);

    DenoiserReport rep;
    {
        const Matrix untrained = signed_mean(model, phi);
        double sq0 = 0.0;
        for (std::size_t i = 0; i < x0.size(); ++i) sq0 += (x0.data()[i] - untrained.data()[i]) * (x0.data()[i] - untrained.data()[i]);
        rep.initial_renderer_mse = sq0 / static_cast<double>(x0.size()) / 4.0;
    }
    fit_renderer(model, phi, x0, renderer_cfg, rep);

    const Matrix mean = signed_mean(model, phi);
    Matrix u0 = x0;
    double sq = 0.0;
    for (std::size_t i = 0; i < u0.size(); ++i) {
        u0.data()[i] -= mean.data()[i];
        sq += u0.data()[i] * u0.data()[i];
    }
    rep.renderer_mse = sq / static_cast<double>(u0.size()) / 4.0;
    model.residual_scale = static_cast<double>(static_cast<float>(std::max(std::sqrt(sq / static_cast<double>(u0.size())), 1e-3)));
    rep.residual_scale = model.residual_scale;
    for (double& v : u0.data()) v /= model.residual_scale;

    const std::uint64_t probe_seed = derive_seed(cfg.seed, "denoiser-probe");
    const std::vector<std::size_t> probe_idx = iota_rows(std::min<std::size_t>(images.rows(), 512));
    const Matrix probe_images = take_rows(images, probe_idx);
    const Matrix probe_z = take_rows(z, probe_idx);
    rep.initial_loss = denoising_loss(model, probe_images, probe_z, probe_seed);

    try {
        fit_noise_net(model, phi, u0, cfg, rep);
    } catch (...) {
        if (report) *report = rep;
        throw;
    }
    rep.final_loss = denoising_loss(model, probe_images, probe_z, probe_seed);
    if (report) *report = rep;
    return model;
}

Matrix ddim_sample(const DenoiserModel& model, const Matrix& z, const Matrix& x_T) {
    check_batch(model, x_T, z, "ddim_sample");
    check_finite(x_T, "ddim_sample", model.schedule.steps());
    const Matrix phi = model.features(z);
    Matrix u = x_T;
    for (std::size_t t = model.schedule.steps(); t-- > 0;) {
        const Matrix eps = predict_from_features(model, u, t, phi);
        const double ab = model.schedule.alpha_bars[t], ap = model.schedule.alpha_bar_prev(t);
        const double c0 = std::sqrt(ap / ab);
        const double c1 = std::sqrt(1.0 - ap) - std::sqrt(ap * (1.0 - ab) / ab);
        for (std::size_t i = 0; i < u.size(); ++i) u.data()[i] = c0 * u.data()[i] + c1 * eps.data()[i];
        check_finite(u, "ddim_sample", t);
    }
    const Matrix mean = signed_mean(model, phi);
    for (std::size_t i = 0; i < u.size(); ++i) u.data()[i] = mean.data()[i] + model.residual_scale * u.data()[i];
    return to_pixels(u);
}

Matrix ddim_invert(const DenoiserModel& model, const Matrix& images, const Matrix& z, const InversionOptions& options) {
    check_batch(model, images, z, "ddim_invert");
    check_finite(images, "ddim_invert", 0);
    const Matrix phi = model.features(z);
    Matrix u = to_signed(images);
    const Matrix mean = signed_mean(model, phi);
    for (std::size_t i = 0; i < u.size(); ++i) u.data()[i] = (u.data()[i] - mean.data()[i]) / model.residual_scale;
    for (std::size_t t = 0; t < model.schedule.steps(); ++t) {
        const double ab = model.schedule.alpha_bars[t], ap = model.schedule.alpha_bar_prev(t);
        // exact inverse of the sampling update for a given eps
        const double c0 = std::sqrt(ab / ap);
        const double c1 = std::sqrt(1.0 - ab) - std::sqrt(ab * (1.0 - ap) / ap);
        const Matrix prev = u;
        Matrix eps = predict_from_features(model, prev, t, phi);
        for (std::size_t i = 0; i < u.size(); ++i) u.data()[i] = c0 * prev.data()[i] + c1 * eps.data()[i];
        for (std::size_t it = 0; it < options.refine_iterations; ++it) {
            eps = predict_from_features(model, u, t, phi);
            double change = 0.0;
            for (std::size_t i = 0; i < u.size(); ++i) {
                const double next = c0 * prev.data()[i] + c1 * eps.data()[i];
                change = std::max(change, std::abs(next - u.data()[i]));
                u.data()[i] = next;
            }
            if (change <= options.refine_tolerance) break;
        }
        check_finite(u, "ddim_invert", t);
    }
    return u;
}

Matrix decode_counterfactual(const DenoiserModel& model, const Matrix& z_prime, const Matrix& x_T) {
    return ddim_sample(model, z_prime, x_T);
}

// ---- persistence ---------------------------------------------------------------

namespace {

std::string exact(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

Container denoiser_to_container(const DenoiserModel& model, const KeyValues& extra) {
    KeyValues header = extra;
    header["role"] = "denoiser";
    header["cond_dim"] = std::to_string(model.cond_dim);
    header["schedule_steps"] = std::to_string(model.schedule.config.steps);
    header["schedule_base_steps"] = std::to_string(model.schedule.config.base_steps);
    header["schedule_beta_start"] = exact(model.schedule.config.beta_start);
    header["schedule_beta_end"] = exact(model.schedule.config.beta_end);
    header["time_embed_width"] = std::to_string(kTimeEmbedWidth);
    header["residual_scale"] = exact(model.residual_scale);
    Container c = models::model_to_container(model.net, header);
    for (const auto& l : model.renderer.layers()) {
        c.add_matrix(BlockKind::aux_layer_weight, l.weight);
        c.add_matrix(BlockKind::aux_layer_bias, Matrix(1, l.bias.size(), l.bias));
    }
    c.add_matrix(BlockKind::feature_map, model.frequencies);
    return c;
}

DenoiserModel denoiser_from_container(const Container& c, KeyValues* header_out) {
    KeyValues header;
    DenoiserModel m;
    m.net = models::model_from_container(c, &header);
    if (auto it = header.find("role"); it == header.end() || it->second != "denoiser")
        fail(ErrorCode::format, "checkpoint is not a denoiser");
    ScheduleConfig s;
    try {
        s.steps = std::stoull(require_key(header, "schedule_steps"));
        s.base_steps = std::stoull(require_key(header, "schedule_base_steps"));
        s.beta_start = std::stod(require_key(header, "schedule_beta_start"));
        s.beta_end = std::stod(require_key(header, "schedule_beta_end"));
        m.cond_dim = std::stoull(require_key(header, "cond_dim"));
        m.residual_scale = std::stod(require_key(header, "residual_scale"));
    } catch (const std::logic_error&) {
        fail(ErrorCode::format, "denoiser header has malformed fields");
    }
    if (!(m.residual_scale > 0.0) || !std::isfinite(m.residual_scale))
        fail(ErrorCode::format, "denoiser residual scale must be positive");
    try {
        m.schedule = NoiseSchedule::make(s);
    } catch (const Error& e) {
        fail(ErrorCode::format, std::string("denoiser schedule invalid: ") + e.what());
    }

    m.frequencies = c.get(BlockKind::feature_map, "fourier frequencies").values;
    if (m.frequencies.rows() != m.cond_dim || m.frequencies.cols() == 0)
        fail(ErrorCode::format, "fourier frequency block does not match cond_dim");
    const std::size_t f = 2 * m.frequencies.cols();

    const auto weights = c.all(BlockKind::aux_layer_weight);
    const auto biases = c.all(BlockKind::aux_layer_bias);
    if (weights.empty() || weights.size() != biases.size()) fail(ErrorCode::format, "renderer layer blocks missing");
    std::vector<std::size_t> sizes{weights.front()->values.rows()};
    for (const Block* w : weights) {
        if (w->values.rows() != sizes.back()) fail(ErrorCode::format, "renderer layer shapes do not chain");
        sizes.push_back(w->values.cols());
    }
    if (sizes.front() != f || sizes.back() != squares::kPixels)
        fail(ErrorCode::format, "renderer widths do not match the feature map");
    m.renderer = MlpModel(sizes, models::TaskHead::regression, 0);
    for (std::size_t l = 0; l < weights.size(); ++l) {
        const Matrix& b = biases[l]->values;
        if (b.rows() != 1 || b.cols() != sizes[l + 1]) fail(ErrorCode::format, "renderer bias has the wrong shape");
        m.renderer.layers()[l].weight = weights[l]->values;
        m.renderer.layers()[l].bias.assign(b.data().begin(), b.data().end());
    }

    if (m.net.input_width() != squares::kPixels + kTimeEmbedWidth + f || m.net.output_width() != squares::kPixels)
        fail(ErrorCode::format, "denoiser network widths do not match its header");
    if (header_out) *header_out = header;
    return m;
}

void save_denoiser(const std::filesystem::path& path, const DenoiserModel& model, const KeyValues& extra) {
    denoiser_to_container(model, extra).save(path);
}

DenoiserModel load_denoiser(const std::filesystem::path& path, KeyValues* header) {
    return denoiser_from_container(Container::load(path), header);
}

}  // namespace ddae::diffusion
