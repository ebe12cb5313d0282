#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "ddae/container.hpp"
#include "ddae/numerics.hpp"
#include "ddae/squares.hpp"

namespace ddae::models {

enum class TaskHead { regression, binary_classification };

// y = x * weight + bias; weight is (inputs x outputs).
struct DenseLayer {
    Matrix weight;
    Vector bias;
};

// Fixed affine map applied to inputs before the first layer: x * scale + shift.
struct InputNorm {
    double scale = 1.0;
    double shift = 0.0;
};

// Image models see pixels mapped from [0,1] to [-1,1].
inline constexpr InputNorm kPixelNorm{2.0, -1.0};

// Fully-connected network with tanh hidden units and a linear output layer.
class MlpModel {
public:
    MlpModel() = default;
    MlpModel(std::vector<std::size_t> layer_sizes, TaskHead head, std::uint64_t init_seed,
             InputNorm input_norm = {});

    const std::vector<std::size_t>& layer_sizes() const noexcept { return sizes_; }
    TaskHead head() const noexcept { return head_; }
    std::size_t input_width() const { return sizes_.front(); }
    std::size_t output_width() const { return sizes_.back(); }
    std::size_t layer_count() const noexcept { return layers_.size(); }
    std::size_t parameter_count() const;
    InputNorm input_norm() const noexcept { return norm_; }
    Matrix normalize_input(const Matrix& x) const;

    const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
    std::vector<DenseLayer>& layers() noexcept { return layers_; }

    Matrix forward(const Matrix& x) const;
    // Output of the last tanh layer (the input to the linear head).
    Matrix last_hidden(const Matrix& x) const;

    // FNV digest over parameter bytes; used to prove frozen models stay frozen.
    std::uint64_t checksum() const;
    bool all_finite() const;
    // Round parameters through float32 so in-memory and on-disk models agree.
    void quantize();

private:
    std::vector<std::size_t> sizes_;
    TaskHead head_ = TaskHead::regression;
    InputNorm norm_;
    std::vector<DenseLayer> layers_;
};

struct ForwardTrace {
    // activations[0] is the normalized input; activations[l + 1] is the output of layer l
    std::vector<Matrix> activations;
    const Matrix& output() const { return activations.back(); }
};

struct Gradients {
    std::vector<Matrix> weight;
    std::vector<Vector> bias;
    Matrix input;  // dL/dx with respect to the raw (un-normalized) input
};

ForwardTrace forward_trace(const MlpModel& model, const Matrix& x);

// Hand-derived backpropagation. Every call bumps the process-wide gradient ledger.
Gradients backward(const MlpModel& model, const ForwardTrace& trace, const Matrix& d_output);

// Process-wide count of backward passes.
class GradientLedger {
public:
    static std::uint64_t backward_pass_count() noexcept;
    static void record_backward_pass() noexcept;
};

struct TrainConfig {
    double learning_rate = 0.05;
    std::size_t epochs = 50;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    double weight_decay = 0.0;
};

void validate(const TrainConfig& cfg);

// Plain minibatch gradient descent step with decoupled weight decay on weights.
void sgd_update(MlpModel& model, const Gradients& g, double learning_rate, double weight_decay);

class AdamOptimizer {
public:
    explicit AdamOptimizer(const MlpModel& model, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8);
    void step(MlpModel& model, const Gradients& g, double learning_rate);

private:
    double beta1_, beta2_, epsilon_;
    std::size_t t_ = 0;
    std::vector<Matrix> m_w_, v_w_;
    std::vector<Vector> m_b_, v_b_;
};

// Half-cosine decay from `base` at progress 0 to 0 at progress 1.
double cosine_learning_rate(double base, double progress);

// Loss helpers return the mean loss and fill d_output with dLoss/dOutput.
double mse_loss(const Matrix& output, const Matrix& target, Matrix& d_output);
double softmax_cross_entropy(const Matrix& logits, std::span<const int> labels, std::span<const double> weights,
                             Matrix& d_output);

// argmax of two logits, ties go to class 0
int predict_class(std::span<const double> logits);
std::vector<int> predict_classes(const MlpModel& model, const Matrix& x);
// logit_1 - logit_0, the real-valued score a probe distills
Vector class_scores(const MlpModel& model, const Matrix& x);
double accuracy(std::span<const int> predicted, std::span<const int> labels);

// ---- foundation encoder --------------------------------------------------

inline constexpr std::size_t kEmbeddingDim = 16;
// Scale of the standardized latents inside the embedding.
inline constexpr double kEmbeddingGain = 0.5;

struct EncoderReport {
    double heldout_mse = 0.0;  // through the latent readout, averaged over the four latents
    Vector heldout_mse_per_latent;
    double initial_heldout_mse = 0.0;
    std::vector<double> epoch_loss;
};

// The embedding layer is trained to a fixed rotation of the standardized
// latents, z = gain * A * s, with A a seeded orthonormal kEmbeddingDim x 4
// frame; the 4-wide readout head then inverts that map exactly. Minibatch SGD
// with the learning rate cosine-decayed over the epochs.
MlpModel make_encoder(std::uint64_t init_seed);
MlpModel train_encoder(const squares::DatasetSplit& train, const TrainConfig& cfg, EncoderReport* report = nullptr);
// z_sem: one row per image, kEmbeddingDim columns.
Matrix embed(const MlpModel& encoder, const Matrix& images);

// ---- student classifiers and oracle --------------------------------------

struct StudentReport {
    double train_accuracy = 0.0;
    std::vector<double> epoch_loss;
    std::vector<std::string> warnings;
};

MlpModel make_student(std::uint64_t init_seed);
MlpModel train_student(const squares::DatasetSplit& train, const TrainConfig& cfg, StudentReport* report = nullptr);
// Continue training an existing classifier on weighted data (warm start).
StudentReport fit_classifier(MlpModel& model, const Matrix& images, std::span<const int> labels,
                             std::span<const double> weights, const TrainConfig& cfg);

struct OracleReport {
    double train_agreement = 0.0;
    double heldout_agreement = 0.0;
};

// Fresh network (different width and seed) fitted to f's hard decisions.
MlpModel distill_oracle(const MlpModel& f, const squares::DatasetSplit& train, const TrainConfig& cfg,
                        OracleReport* report = nullptr);

// ---- linear probes --------------------------------------------------------

struct LinearProbe {
    Vector w;
    double b = 0.0;

    double score(std::span<const double> z) const;
    Vector scores(const Matrix& z) const;
    int predict(std::span<const double> z) const { return score(z) > 0.0 ? 1 : 0; }
    std::vector<int> predict(const Matrix& z) const;
};

// Closed-form ridge least squares with an unpenalized bias.
LinearProbe fit_linear_probe(const Matrix& z, std::span<const double> targets, double ridge,
                             std::span<const double> weights = {});
double sign_agreement(const LinearProbe& probe, const Matrix& z, std::span<const double> targets);

// ---- gradient checking ----------------------------------------------------

struct GradientCheckReport {
    double max_relative_error = 0.0;
    std::size_t parameters_checked = 0;
    bool all_finite = true;
    double saturated_fraction = 0.0;  // hidden units with |tanh| > 0.99
    bool saturated = false;
    bool passed = false;
};

// Checks every parameter when samples_per_layer is 0, otherwise a seeded
// random subset of that many weights and biases in each layer.
GradientCheckReport gradient_check(const MlpModel& model, const Matrix& input, double tolerance,
                                   std::size_t samples_per_layer = 0);

// ---- persistence ----------------------------------------------------------

Container model_to_container(const MlpModel& model, const KeyValues& extra = {});
MlpModel model_from_container(const Container& c, KeyValues* header = nullptr);
void save_model(const std::filesystem::path& path, const MlpModel& model, const KeyValues& extra = {});
MlpModel load_model(const std::filesystem::path& path, KeyValues* header = nullptr);

Container probe_to_container(const LinearProbe& probe, const KeyValues& extra = {});
LinearProbe probe_from_container(const Container& c, KeyValues* header = nullptr);

}  // namespace ddae::models
