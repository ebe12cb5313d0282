#include "ddae/models.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <numeric>
#include <cmath>
#include <numbers>
#include <sstream>

#include "ddae/error.hpp"
#include "ddae/rng.hpp"

namespace ddae::models {

namespace {

std::atomic<std::uint64_t> g_backward_passes{0};

void add_bias(Matrix& m, std::span<const double> bias) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c];
    }
}

void apply_tanh(Matrix& m) {
    for (double& x : m.data()) x = std::tanh(x);
}

std::string join_sizes(const std::vector<std::size_t>& sizes) {
    std::string s;
    for (std::size_t i = 0; i < sizes.size(); ++i) s += (i ? "," : "") + std::to_string(sizes[i]);
    return s;
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoull(item));
    return out;
}

// deterministic 80/20 split by a seeded permutation
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> holdout_split(std::size_t n, std::uint64_t seed) {
    SeededRng rng(derive_seed(seed, "holdout"));
    auto perm = rng.permutation(n);
    const std::size_t n_hold = n / 5;
    std::vector<std::size_t> hold(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_hold));
    std::vector<std::size_t> fit(perm.begin() + static_cast<std::ptrdiff_t>(n_hold), perm.end());
    return {fit, hold};
}

}  // namespace

// ---- MlpModel ---------------------------------------------------------------

MlpModel::MlpModel(std::vector<std::size_t> layer_sizes, TaskHead head, std::uint64_t init_seed,
                   InputNorm input_norm)
    : sizes_(std::move(layer_sizes)), head_(head), norm_(input_norm) {
    require(sizes_.size() >= 2, "MlpModel: need at least input and output widths");
    for (std::size_t s : sizes_) require(s > 0, "MlpModel: zero-width layer");
    if (head_ == TaskHead::binary_classification)
        require(sizes_.back() == 2, "MlpModel: binary classification head needs two logits");
    SeededRng rng(derive_seed(init_seed, "mlp-init"));
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
        const std::size_t in = sizes_[l], out = sizes_[l + 1];
        DenseLayer layer{Matrix(in, out), Vector(out, 0.0)};
        const double scale = 1.0 / std::sqrt(static_cast<double>(in));
        for (double& w : layer.weight.data()) w = scale * rng.normal();
        layers_.push_back(std::move(layer));
    }
}

std::size_t MlpModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
}

Matrix MlpModel::normalize_input(const Matrix& x) const {
    if (norm_.scale == 1.0 && norm_.shift == 0.0) return x;
    Matrix out = x;
    for (double& v : out.data()) v = v * norm_.scale + norm_.shift;
    return out;
}

Matrix MlpModel::forward(const Matrix& x) const {
    require(x.cols() == input_width(), "MlpModel::forward: input width " + std::to_string(x.cols()) +
                                           " != " + std::to_string(input_width()));
    Matrix a = normalize_input(x);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        a = matmul(a, layers_[l].weight);
        add_bias(a, layers_[l].bias);
        if (l + 1 < layers_.size()) apply_tanh(a);
    }
    return a;
}

Matrix MlpModel::last_hidden(const Matrix& x) const {
    require(x.cols() == input_width(), "MlpModel::last_hidden: input width mismatch");
    require(layers_.size() >= 2, "MlpModel::last_hidden: model has no hidden layer");
    Matrix a = normalize_input(x);
    for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
        a = matmul(a, layers_[l].weight);
        add_bias(a, layers_[l].bias);
        apply_tanh(a);
    }
    return a;
}

std::uint64_t MlpModel::checksum() const {
    std::uint64_t h = fnv1a64(join_sizes(sizes_));
    h ^= std::bit_cast<std::uint64_t>(norm_.scale) * 31 + std::bit_cast<std::uint64_t>(norm_.shift);
    auto mix = [&h](double x) {
        const auto bits = std::bit_cast<std::uint64_t>(x);
        for (int i = 0; i < 8; ++i) {
            h ^= (bits >> (8 * i)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& l : layers_) {
        for (double w : l.weight.data()) mix(w);
        for (double b : l.bias) mix(b);
    }
    return h;
}

bool MlpModel::all_finite() const {
    for (const auto& l : layers_) {
        if (!l.weight.all_finite()) return false;
        for (double b : l.bias)
            if (!std::isfinite(b)) return false;
    }
    return true;
}

void MlpModel::quantize() {
    for (auto& l : layers_) {
        l.weight = quantize_f32(std::move(l.weight));
        l.bias = quantize_f32(std::move(l.bias));
    }
}

// ---- forward / backward ---------------------------------------------------------

ForwardTrace forward_trace(const MlpModel& model, const Matrix& x) {
    require(x.cols() == model.input_width(), "forward_trace: input width mismatch");
    ForwardTrace t;
    t.activations.reserve(model.layer_count() + 1);
    t.activations.push_back(model.normalize_input(x));
    const auto& layers = model.layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        Matrix a = matmul(t.activations.back(), layers[l].weight);
        add_bias(a, layers[l].bias);
        if (l + 1 < layers.size()) apply_tanh(a);
        t.activations.push_back(std::move(a));
    }
    return t;
}

Gradients backward(const MlpModel& model, const ForwardTrace& trace, const Matrix& d_output) {
    const auto& layers = model.layers();
    require(trace.activations.size() == layers.size() + 1, "backward: trace does not match model");
    require(d_output.rows() == trace.output().rows() && d_output.cols() == trace.output().cols(),
            "backward: d_output shape mismatch");
    GradientLedger::record_backward_pass();

    Gradients g;
    g.weight.resize(layers.size());
    g.bias.resize(layers.size());
    Matrix delta = d_output;  // dL/d(pre-activation) of the current layer
    for (std::size_t l = layers.size(); l-- > 0;) {
        const Matrix& in = trace.activations[l];
        g.weight[l] = matmul_tn(in, delta);
        g.bias[l].assign(delta.cols(), 0.0);
        for (std::size_t r = 0; r < delta.rows(); ++r) {
            const auto dr = delta.row(r);
            for (std::size_t c = 0; c < dr.size(); ++c) g.bias[l][c] += dr[c];
        }
        Matrix d_in = matmul_nt(delta, layers[l].weight);
        if (l > 0) {
            // in = tanh(pre): d pre = d in * (1 - in^2)
            auto di = d_in.data();
            const auto a = in.data();
            for (std::size_t i = 0; i < di.size(); ++i) di[i] *= 1.0 - a[i] * a[i];
        }
        delta = std::move(d_in);
    }
    if (model.input_norm().scale != 1.0) delta *= model.input_norm().scale;
    g.input = std::move(delta);
    return g;
}

std::uint64_t GradientLedger::backward_pass_count() noexcept { return g_backward_passes.load(); }

void GradientLedger::record_backward_pass() noexcept { g_backward_passes.fetch_add(1); }

// ---- training -------------------------------------------------------------------

void validate(const TrainConfig& cfg) {
    require(cfg.learning_rate > 0.0 && std::isfinite(cfg.learning_rate), "TrainConfig: learning_rate must be positive");
    require(cfg.epochs > 0, "TrainConfig: epochs must be positive");
    require(cfg.batch_size > 0, "TrainConfig: batch_size must be positive");
    require(cfg.weight_decay >= 0.0, "TrainConfig: weight_decay must be non-negative");
}

void sgd_update(MlpModel& model, const Gradients& g, double learning_rate, double weight_decay) {
    auto& layers = model.layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        auto w = layers[l].weight.data();
        const auto gw = g.weight[l].data();
        const double shrink = 1.0 - learning_rate * weight_decay;
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = shrink * w[i] - learning_rate * gw[i];
        auto& b = layers[l].bias;
        for (std::size_t i = 0; i < b.size(); ++i) b[i] -= learning_rate * g.bias[l][i];
    }
}

AdamOptimizer::AdamOptimizer(const MlpModel& model, double beta1, double beta2, double epsilon)
    : beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
    for (const auto& l : model.layers()) {
        m_w_.emplace_back(l.weight.rows(), l.weight.cols());
        v_w_.emplace_back(l.weight.rows(), l.weight.cols());
        m_b_.emplace_back(l.bias.size(), 0.0);
        v_b_.emplace_back(l.bias.size(), 0.0);
    }
}

void AdamOptimizer::step(MlpModel& model, const Gradients& g, double learning_rate) {
    require(model.layer_count() == m_w_.size() && g.weight.size() == m_w_.size(), "adam: model shape changed");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    auto update = [&](std::span<double> p, std::span<const double> grad, std::span<double> m, std::span<double> v) {
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * grad[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * grad[i] * grad[i];
            p[i] -= learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + epsilon_);
        }
    };
    for (std::size_t l = 0; l < m_w_.size(); ++l) {
        update(model.layers()[l].weight.data(), g.weight[l].data(), m_w_[l].data(), v_w_[l].data());
        update(model.layers()[l].bias, g.bias[l], m_b_[l], v_b_[l]);
    }
}

double cosine_learning_rate(double base, double progress) {
    const double p = std::clamp(progress, 0.0, 1.0);
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

double mse_loss(const Matrix& output, const Matrix& target, Matrix& d_output) {
    require(output.rows() == target.rows() && output.cols() == target.cols(), "mse_loss: shape mismatch");
    d_output = Matrix(output.rows(), output.cols());
    const double n = static_cast<double>(std::max<std::size_t>(output.rows(), 1));
    double sum = 0.0;
    const auto o = output.data();
    const auto t = target.data();
    auto d = d_output.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        const double e = o[i] - t[i];
        sum += e * e;
        d[i] = e / n;  // gradient of half the per-sample squared error, batch mean
    }
    return o.empty() ? 0.0 : sum / static_cast<double>(o.size());
}

double softmax_cross_entropy(const Matrix& logits, std::span<const int> labels, std::span<const double> weights,
                             Matrix& d_output) {
    require(logits.cols() == 2 && labels.size() == logits.rows(), "softmax_cross_entropy: shape mismatch");
    require(weights.empty() || weights.size() == labels.size(), "softmax_cross_entropy: weight count mismatch");
    d_output = Matrix(logits.rows(), 2);
    double total_w = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) total_w += weights.empty() ? 1.0 : weights[i];
    if (total_w <= 0.0) return 0.0;
    double loss = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double w = weights.empty() ? 1.0 : weights[i];
        const double l0 = logits(i, 0), l1 = logits(i, 1);
        const double m = std::max(l0, l1);
        const double e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
        const double p1 = e1 / (e0 + e1);
        const double p0 = 1.0 - p1;
        const int y = labels[i];
        loss += w * -(std::log(y == 1 ? p1 : p0) );
        d_output(i, 0) = w * (p0 - (y == 0 ? 1.0 : 0.0)) / total_w;
        d_output(i, 1) = w * (p1 - (y == 1 ? 1.0 : 0.0)) / total_w;
    }
    return loss / total_w;
}

int predict_class(std::span<const double> logits) { return logits[1] > logits[0] ? 1 : 0; }

std::vector<int> predict_classes(const MlpModel& model, const Matrix& x) {
    const Matrix out = model.forward(x);
    std::vector<int> pred(out.rows());
    for (std::size_t i = 0; i < out.rows(); ++i) pred[i] = predict_class(out.row(i));
    return pred;
}

Vector class_scores(const MlpModel& model, const Matrix& x) {
    const Matrix out = model.forward(x);
    Vector s(out.rows());
    for (std::size_t i = 0; i < out.rows(); ++i) s[i] = out(i, 1) - out(i, 0);
    return s;
}

double accuracy(std::span<const int> predicted, std::span<const int> labels) {
    require(predicted.size() == labels.size(), "accuracy: length mismatch");
    if (labels.empty()) return 0.0;
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

// ---- encoder ---------------------------------------------------------------------

MlpModel make_encoder(std::uint64_t init_seed) {
    return MlpModel({squares::kPixels, 64, 64, kEmbeddingDim, 4}, TaskHead::regression, init_seed, kPixelNorm);
}

MlpModel train_encoder(const squares::DatasetSplit& train, const TrainConfig& cfg, EncoderReport* report) {
    validate(cfg);
    if (train.size() == 0) fail(ErrorCode::invalid_input, "train_encoder: empty training split");
    const Matrix images = train.images();
    const Matrix latents = train.latent_matrix();
    const std::size_t k = latents.cols();

    const Vector mean = column_means(latents);
    Vector sd(k, 0.0);
    for (std::size_t i = 0; i < latents.rows(); ++i)
        for (std::size_t j = 0; j < k; ++j) sd[j] += (latents(i, j) - mean[j]) * (latents(i, j) - mean[j]);
    for (std::size_t j = 0; j < k; ++j) {
        sd[j] = std::sqrt(sd[j] / static_cast<double>(latents.rows()));
        if (!(sd[j] > 1e-9))
            fail(ErrorCode::invalid_input, std::string("train_encoder: latent '") + squares::kLatentNames[j] + "' is constant");
    }
    SeededRng frame_rng(derive_seed(cfg.seed, "encoder-frame"));
    Matrix frame(kEmbeddingDim, k);
    for (double& v : frame.data()) v = frame_rng.normal();
    reorthonormalize_columns(frame);

    Matrix targets(latents.rows(), kEmbeddingDim);
    for (std::size_t i = 0; i < latents.rows(); ++i)
        for (std::size_t e = 0; e < kEmbeddingDim; ++e) {
            double acc = 0.0;
            for (std::size_t j = 0; j < k; ++j) acc += frame(e, j) * (latents(i, j) - mean[j]) / sd[j];
            targets(i, e) = kEmbeddingGain * acc;
        }

    auto [fit_idx, hold_idx] = holdout_split(train.size(), cfg.seed);
    if (hold_idx.empty()) hold_idx = fit_idx;
    const Matrix hold_x = take_rows(images, hold_idx);
    const Matrix hold_t = take_rows(latents, hold_idx);

    // Training network: the embedding layer followed by a frozen identity.
    const std::uint64_t init_seed = derive_seed(cfg.seed, "encoder");
    MlpModel net({squares::kPixels, 64, 64, kEmbeddingDim, kEmbeddingDim}, TaskHead::regression, init_seed, kPixelNorm);
    net.layers().back().weight = Matrix::identity(kEmbeddingDim);
    std::fill(net.layers().back().bias.begin(), net.layers().back().bias.end(), 0.0);

    auto with_readout = [&](const MlpModel& trained) {
        MlpModel model = make_encoder(init_seed);
        for (std::size_t l = 0; l + 1 < model.layer_count(); ++l) model.layers()[l] = trained.layers()[l];
        DenseLayer& head = model.layers().back();
        for (std::size_t e = 0; e < kEmbeddingDim; ++e)
            for (std::size_t j = 0; j < k; ++j) head.weight(e, j) = frame(e, j) * sd[j] / kEmbeddingGain;
        head.bias = mean;
        return model;
    };

    EncoderReport rep;
    Matrix scratch;
    rep.initial_heldout_mse = mse_loss(with_readout(net).forward(hold_x), hold_t, scratch);

    SeededRng rng(derive_seed(cfg.seed, "encoder-batches"));
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(fit_idx);
        const double lr =
            cosine_learning_rate(cfg.learning_rate, static_cast<double>(epoch) / static_cast<double>(cfg.epochs));
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < fit_idx.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(fit_idx.size(), start + cfg.batch_size);
            std::span<const std::size_t> idx(fit_idx.data() + start, end - start);
            const ForwardTrace trace = forward_trace(net, take_rows(images, idx));
            Matrix d;
            epoch_loss += mse_loss(trace.output(), take_rows(targets, idx), d);
            ++batches;
            Gradients g = backward(net, trace, d);
            std::fill(g.weight.back().data().begin(), g.weight.back().data().end(), 0.0);
            std::fill(g.bias.back().begin(), g.bias.back().end(), 0.0);
            sgd_update(net, g, lr, cfg.weight_decay);
            net.layers().back().weight = Matrix::identity(kEmbeddingDim);  // decay must not touch the frozen layer
        }
        rep.epoch_loss.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(batches, 1)));
        if (!std::isfinite(rep.epoch_loss.back()))
            fail(ErrorCode::training_failure, "train_encoder: loss diverged at epoch " + std::to_string(epoch));
    }
    MlpModel model = with_readout(net);
    model.quantize();
    const Matrix pred = model.forward(hold_x);
    rep.heldout_mse = mse_loss(pred, hold_t, scratch);
    rep.heldout_mse_per_latent.assign(k, 0.0);
    for (std::size_t i = 0; i < pred.rows(); ++i)
        for (std::size_t j = 0; j < k; ++j)
            rep.heldout_mse_per_latent[j] += (pred(i, j) - hold_t(i, j)) * (pred(i, j) - hold_t(i, j)) / static_cast<double>(pred.rows());
    if (report) *report = rep;
    if (rep.heldout_mse > 0.05) {
        std::ostringstream msg;
        msg << "train_encoder: held-out latent MSE " << rep.heldout_mse << " > 0.05 after " << cfg.epochs
            << " epochs (initial " << rep.initial_heldout_mse << ", final train loss "
            << rep.epoch_loss.back() << ")";
        fail(ErrorCode::training_failure, msg.str());
    }
    return model;
}

Matrix embed(const MlpModel& encoder, const Matrix& images) { return encoder.last_hidden(images); }

// ---- students ---------------------------------------------------------------------

MlpModel make_student(std::uint64_t init_seed) {
    return MlpModel({squares::kPixels, 32, 32, 2}, TaskHead::binary_classification, init_seed, kPixelNorm);
}

StudentReport fit_classifier(MlpModel& model, const Matrix& images, std::span<const int> labels,
                             std::span<const double> weights, const TrainConfig& cfg) {
    validate(cfg);
    require(model.head() == TaskHead::binary_classification, "fit_classifier: model is not a classifier");
    require(images.rows() == labels.size(), "fit_classifier: label count mismatch");
    require(weights.empty() || weights.size() == labels.size(), "fit_classifier: weight count mismatch");
    if (images.rows() == 0) fail(ErrorCode::invalid_input, "fit_classifier: no training samples");

    StudentReport rep;
    const bool single_class = std::all_of(labels.begin(), labels.end(), [&](int y) { return y == labels[0]; });
    if (single_class) rep.warnings.push_back("degenerate: training labels contain a single class");

    std::vector<std::size_t> order(images.rows());
    std::iota(order.begin(), order.end(), std::size_t{0});
    SeededRng rng(derive_seed(cfg.seed, "classifier-batches"));
    std::vector<int> batch_labels;
    std::vector<double> batch_weights;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::span<const std::size_t> idx(order.data() + start, end - start);
            batch_labels.clear();
            batch_weights.clear();
            for (std::size_t i : idx) {
                batch_labels.push_back(labels[i]);
                if (!weights.empty()) batch_weights.push_back(weights[i]);
            }
            const ForwardTrace trace = forward_trace(model, take_rows(images, idx));
            Matrix d;
            epoch_loss += softmax_cross_entropy(trace.output(), batch_labels, batch_weights, d);
            ++batches;
            sgd_update(model, backward(model, trace, d), cfg.learning_rate, cfg.weight_decay);
        }
        rep.epoch_loss.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(batches, 1)));
        if (!std::isfinite(rep.epoch_loss.back()))
            fail(ErrorCode::training_failure, "fit_classifier: loss diverged at epoch " + std::to_string(epoch));
    }
    model.quantize();
    rep.train_accuracy = accuracy(predict_classes(model, images), labels);
    return rep;
}

MlpModel train_student(const squares::DatasetSplit& train, const TrainConfig& cfg, StudentReport* report) {
    if (train.size() == 0) fail(ErrorCode::invalid_input, "train_student: empty training split");
    MlpModel model = make_student(derive_seed(cfg.seed, "student"));
    const auto labels = train.labels();
    StudentReport rep = fit_classifier(model, train.images(), labels, {}, cfg);
    if (report) *report = rep;
    if (rep.train_accuracy < 0.9) {
        std::ostringstream msg;
        msg << "train_student: train accuracy " << rep.train_accuracy << " < 0.9 after " << cfg.epochs
            << " epochs (final loss " << rep.epoch_loss.back() << ")";
        fail(ErrorCode::training_failure, msg.str());
    }
    return model;
}

MlpModel distill_oracle(const MlpModel& f, const squares::DatasetSplit& train, const TrainConfig& cfg,
                        OracleReport* report) {
    if (train.size() == 0) fail(ErrorCode::invalid_input, "distill_oracle: empty split");
    const Matrix images = train.images();
    const std::vector<int> teacher = predict_classes(f, images);
    auto [fit_idx, hold_idx] = holdout_split(train.size(), derive_seed(cfg.seed, "oracle"));
    if (hold_idx.empty()) hold_idx = fit_idx;
    const Matrix fit_x = take_rows(images, fit_idx);
    std::vector<int> fit_y;
    for (std::size_t i : fit_idx) fit_y.push_back(teacher[i]);

    MlpModel oracle({squares::kPixels, 48, 48, 2}, TaskHead::binary_classification, derive_seed(cfg.seed, "oracle-init"),
                    kPixelNorm);
    fit_classifier(oracle, fit_x, fit_y, {}, cfg);

    OracleReport rep;
    rep.train_agreement = accuracy(predict_classes(oracle, fit_x), fit_y);
    std::vector<int> hold_y;
    for (std::size_t i : hold_idx) hold_y.push_back(teacher[i]);
    rep.heldout_agreement = accuracy(predict_classes(oracle, take_rows(images, hold_idx)), hold_y);
    if (report) *report = rep;
    if (rep.heldout_agreement < 0.9) {
        std::ostringstream msg;
        msg << "distill_oracle: held-out agreement with f is " << rep.heldout_agreement << " < 0.9";
        fail(ErrorCode::training_failure, msg.str());
    }
    return oracle;
}

// ---- probes ------------------------------------------------------------------------

double LinearProbe::score(std::span<const double> z) const { return dot(w, z) + b; }

Vector LinearProbe::scores(const Matrix& z) const {
    Vector s(z.rows());
    for (std::size_t i = 0; i < z.rows(); ++i) s[i] = score(z.row(i));
    return s;
}

std::vector<int> LinearProbe::predict(const Matrix& z) const {
    std::vector<int> p(z.rows());
    for (std::size_t i = 0; i < z.rows(); ++i) p[i] = predict(z.row(i));
    return p;
}

LinearProbe fit_linear_probe(const Matrix& z, std::span<const double> targets, double ridge,
                             std::span<const double> weights) {
    require(z.rows() == targets.size() && z.rows() > 0, "fit_linear_probe: row/target count mismatch");
    require(ridge >= 0.0, "fit_linear_probe: ridge must be non-negative");
    require(weights.empty() || weights.size() == targets.size(), "fit_linear_probe: weight count mismatch");
    if (!z.all_finite()) fail(ErrorCode::invalid_input, "fit_linear_probe: non-finite embeddings");
    const std::size_t n = z.rows(), d = z.cols();
    auto wt = [&](std::size_t i) { return weights.empty() ? 1.0 : weights[i]; };

    double total = 0.0;
    Vector mean_z(d, 0.0);
    double mean_t = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double w = wt(i);
        total += w;
        mean_t += w * targets[i];
        const auto zi = z.row(i);
        for (std::size_t c = 0; c < d; ++c) mean_z[c] += w * zi[c];
    }
    require(total > 0.0, "fit_linear_probe: weights sum to zero");
    mean_t /= total;
    for (double& m : mean_z) m /= total;

    Matrix gram(d, d);
    Vector rhs(d, 0.0);
    Vector zc(d);
    for (std::size_t i = 0; i < n; ++i) {
        const double w = wt(i);
        if (w == 0.0) continue;
        const auto zi = z.row(i);
        for (std::size_t c = 0; c < d; ++c) zc[c] = zi[c] - mean_z[c];
        const double tc = targets[i] - mean_t;
        for (std::size_t r = 0; r < d; ++r) {
            rhs[r] += w * zc[r] * tc;
            for (std::size_t c = 0; c < d; ++c) gram(r, c) += w * zc[r] * zc[c];
        }
    }
    for (std::size_t r = 0; r < d; ++r) gram(r, r) += ridge;

    LinearProbe p;
    p.w = solve_spd(gram, rhs);
    p.b = mean_t - dot(p.w, mean_z);
    return p;
}

double sign_agreement(const LinearProbe& probe, const Matrix& z, std::span<const double> targets) {
    require(z.rows() == targets.size(), "sign_agreement: length mismatch");
    if (targets.empty()) return 0.0;
    std::size_t agree = 0;
    for (std::size_t i = 0; i < z.rows(); ++i) agree += (probe.score(z.row(i)) > 0.0) == (targets[i] > 0.0);
    return static_cast<double>(agree) / static_cast<double>(targets.size());
}

// ---- gradient check -----------------------------------------------------------------

GradientCheckReport gradient_check(const MlpModel& model, const Matrix& input, double tolerance,
                                   std::size_t samples_per_layer) {
    constexpr double h = 1e-5;
    constexpr double floor = 1e-6;
    GradientCheckReport rep;

    // L = sum(r .* output) for a fixed random r
    SeededRng rng(0x67c4ec4ULL);
    const Matrix probe_out = model.forward(input);
    Matrix r(probe_out.rows(), probe_out.cols());
    const double scale = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(r.size(), 1)));
    for (double& x : r.data()) x = scale * rng.normal();
    auto loss = [&](const MlpModel& m) {
        const Matrix out = m.forward(input);
        return dot(out.data(), r.data());
    };

    const ForwardTrace trace = forward_trace(model, input);
    const Gradients g = backward(model, trace, r);

    std::size_t hidden_units = 0, saturated = 0;
    for (std::size_t l = 1; l + 1 < trace.activations.size(); ++l) {
        for (double a : trace.activations[l].data()) {
            ++hidden_units;
            saturated += std::abs(a) > 0.99;
        }
    }
    rep.saturated_fraction = hidden_units ? static_cast<double>(saturated) / static_cast<double>(hidden_units) : 0.0;
    rep.saturated = rep.saturated_fraction > 0.25;

    MlpModel probe = model;
    auto check = [&](double& param, double analytic) {
        const double saved = param;
        param = saved + h;
        const double up = loss(probe);
        param = saved - h;
        const double down = loss(probe);
        param = saved;
        const double numeric = (up - down) / (2.0 * h);
        if (!std::isfinite(analytic) || !std::isfinite(numeric)) rep.all_finite = false;
        const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
        rep.max_relative_error = std::max(rep.max_relative_error, std::abs(analytic - numeric) / denom);
        ++rep.parameters_checked;
    };
    for (std::size_t l = 0; l < probe.layers().size(); ++l) {
        auto w = probe.layers()[l].weight.data();
        const auto gw = g.weight[l].data();
        auto& b = probe.layers()[l].bias;
        if (samples_per_layer == 0) {
            for (std::size_t i = 0; i < w.size(); ++i) check(w[i], gw[i]);
            for (std::size_t i = 0; i < b.size(); ++i) check(b[i], g.bias[l][i]);
            continue;
        }
        for (std::size_t s = 0; s < samples_per_layer; ++s) {
            const std::size_t i = static_cast<std::size_t>(rng.below(w.size()));
            check(w[i], gw[i]);
            const std::size_t j = static_cast<std::size_t>(rng.below(b.size()));
            check(b[j], g.bias[l][j]);
        }
    }
    rep.passed = rep.all_finite && rep.max_relative_error < tolerance;
    return rep;
}

// ---- persistence -------------------------------------------------------------------

Container model_to_container(const MlpModel& model, const KeyValues& extra) {
    KeyValues header = extra;
    header["artifact"] = "mlp";
    header["head"] = model.head() == TaskHead::regression ? "regression" : "binary-classification";
    header["layer_sizes"] = join_sizes(model.layer_sizes());
    header["activation"] = "tanh";
    header["input_scale"] = std::to_string(model.input_norm().scale);
    header["input_shift"] = std::to_string(model.input_norm().shift);
    Container c;
    c.add_text(BlockKind::header, format_key_values(header));
    for (const auto& l : model.layers()) {
        c.add_matrix(BlockKind::layer_weight, l.weight);
        c.add_matrix(BlockKind::layer_bias, Matrix(1, l.bias.size(), l.bias));
    }
    return c;
}

MlpModel model_from_container(const Container& c, KeyValues* header_out) {
    const KeyValues header = parse_key_values(c.get(BlockKind::header, "header").text);
    if (require_key(header, "artifact") != "mlp") fail(ErrorCode::format, "not an mlp checkpoint");
    const std::string& head = require_key(header, "head");
    if (head != "regression" && head != "binary-classification") fail(ErrorCode::format, "unknown head '" + head + "'");
    const auto sizes = parse_sizes(require_key(header, "layer_sizes"));
    const auto weights = c.all(BlockKind::layer_weight);
    const auto biases = c.all(BlockKind::layer_bias);
    if (sizes.size() < 2 || weights.size() != sizes.size() - 1 || biases.size() != weights.size())
        fail(ErrorCode::format, "layer block count does not match layer_sizes");
    InputNorm norm;
    if (auto it = header.find("input_scale"); it != header.end()) norm.scale = std::stod(it->second);
    if (auto it = header.find("input_shift"); it != header.end()) norm.shift = std::stod(it->second);
    MlpModel model(sizes, head == "regression" ? TaskHead::regression : TaskHead::binary_classification, 0, norm);
    for (std::size_t l = 0; l < weights.size(); ++l) {
        const Matrix& w = weights[l]->values;
        const Matrix& b = biases[l]->values;
        if (w.rows() != sizes[l] || w.cols() != sizes[l + 1] || b.rows() != 1 || b.cols() != sizes[l + 1])
            fail(ErrorCode::format, "layer " + std::to_string(l) + " has the wrong shape");
        model.layers()[l].weight = w;
        model.layers()[l].bias.assign(b.data().begin(), b.data().end());
    }
    if (header_out) *header_out = header;
    return model;
}

void save_model(const std::filesystem::path& path, const MlpModel& model, const KeyValues& extra) {
    model_to_container(model, extra).save(path);
}

MlpModel load_model(const std::filesystem::path& path, KeyValues* header) {
    return model_from_container(Container::load(path), header);
}

Container probe_to_container(const LinearProbe& probe, const KeyValues& extra) {
    KeyValues header = extra;
    header["artifact"] = "linear-probe";
    Vector packed = probe.w;
    packed.push_back(probe.b);
    Container c;
    c.add_text(BlockKind::header, format_key_values(header));
    c.add_matrix(BlockKind::probe_weights, Matrix(1, packed.size(), packed));
    return c;
}

LinearProbe probe_from_container(const Container& c, KeyValues* header_out) {
    const KeyValues header = parse_key_values(c.get(BlockKind::header, "header").text);
    if (require_key(header, "artifact") != "linear-probe") fail(ErrorCode::format, "not a linear probe");
    const Matrix& m = c.get(BlockKind::probe_weights, "probe weights").values;
    if (m.rows() != 1 || m.cols() < 2) fail(ErrorCode::format, "probe weights have the wrong shape");
    LinearProbe p;
    p.w.assign(m.data().begin(), m.data().end() - 1);
    p.b = m.data().back();
    if (header_out) *header_out = header;
    return p;
}

}  // namespace ddae::models
