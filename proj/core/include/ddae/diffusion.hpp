#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "ddae/models.hpp"
#include "ddae/numerics.hpp"
#include "ddae/squares.hpp"

namespace ddae::diffusion {

inline constexpr std::size_t kTimeEmbedWidth = 32;
inline constexpr std::size_t kHiddenWidth = 256;
// Random Fourier features of z: sin and cos of kFourierFrequencies projections.
inline constexpr std::size_t kFourierFrequencies = 64;
inline constexpr double kFourierScale = 2.0;

// Linear betas over a fine base schedule; sampling uses `steps` evenly spaced
// levels of it. With base_steps == steps this is the plain linear schedule.
struct ScheduleConfig {
    std::size_t steps = 50;
    std::size_t base_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
};

void validate(const ScheduleConfig& cfg);

struct NoiseSchedule {
    ScheduleConfig config;
    Vector betas;                       // effective per-level betas, 1 - abar[t] / abar[t-1]
    Vector alpha_bars;                  // strictly decreasing, index 0 is the least noisy level
    std::vector<std::size_t> timestep;  // base-schedule index of each level (fed to the time embedding)

    static NoiseSchedule make(const ScheduleConfig& cfg);
    std::size_t steps() const { return alpha_bars.size(); }
    // alpha_bar of the level below t (1 for the clean image)
    double alpha_bar_prev(std::size_t t) const { return t == 0 ? 1.0 : alpha_bars[t - 1]; }
};

Vector time_embedding(std::size_t timestep);

// Conditional decoder. Images live in [-1, 1]; a deterministic renderer gives
// the conditional mean m(z) and the diffusion runs on the normalized residual
//   u = (x - m(z)) / residual_scale.
// The noise network sees (u_t, time embedding, phi(z)) and its raw output r is
// combined with a skip from u_t:
//   eps_hat = sqrt(1 - abar_t) * u_t + sqrt(abar_t) * r
// which keeps the regression target at unit scale on every noise level.
struct DenoiserModel {
    models::MlpModel net;
    models::MlpModel renderer;  // phi(z) -> m(z)
    Matrix frequencies;         // cond_dim x kFourierFrequencies
    double residual_scale = 1.0;
    NoiseSchedule schedule;
    std::size_t cond_dim = 0;

    std::size_t workers = 1;  // inference parallelism across rows

    Matrix features(const Matrix& z) const;     // phi(z) = [sin(zB) | cos(zB)]
    Matrix render_mean(const Matrix& z) const;  // m(z) in [0,1] pixel units, unclamped
    Matrix predict_noise(const Matrix& u_t, std::size_t t, const Matrix& z) const;
};

DenoiserModel make_denoiser(const ScheduleConfig& schedule, std::size_t cond_dim, std::uint64_t init_seed);

struct DenoiserReport {
    double initial_renderer_mse = 0.0;  // pixel MSE of the untrained m(z)
    double renderer_mse = 0.0;  // pixel MSE of m(z) on the training split
    double residual_scale = 0.0;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> renderer_epoch_loss;
    std::vector<double> epoch_loss;
};

// Fits the renderer, then the noise network on residuals, both against
// z = embed(encoder, x). Learning rates follow a cosine decay under Adam.
DenoiserModel train_denoiser(const squares::DatasetSplit& train, const models::MlpModel& encoder,
                             const models::TrainConfig& cfg, const models::TrainConfig& renderer_cfg,
                             const ScheduleConfig& schedule, DenoiserReport* report = nullptr);

// Mean noise-prediction error on fixed seeded (t, eps) draws.
double denoising_loss(const DenoiserModel& model, const Matrix& images, const Matrix& z, std::uint64_t seed);

// Deterministic (eta = 0) trajectory from x_T to a [0,1] image. Rows are samples.
Matrix ddim_sample(const DenoiserModel& model, const Matrix& z, const Matrix& x_T);

struct InversionOptions {
    // Fixed-point refinement per level so that sampling retraces the inverted
    // path; 0 gives the plain first-order inversion.
    std::size_t refine_iterations = 6;
    double refine_tolerance = 1e-10;
};

// Stochastic code x_T for [0,1] images under conditioning z.
Matrix ddim_invert(const DenoiserModel& model, const Matrix& images, const Matrix& z,
                   const InversionOptions& options = {});

// Sampling with an edited embedding; kept separate so callers can bracket the
// counterfactual path exactly.
Matrix decode_counterfactual(const DenoiserModel& model, const Matrix& z_prime, const Matrix& x_T);

Container denoiser_to_container(const DenoiserModel& model, const KeyValues& extra = {});
DenoiserModel denoiser_from_container(const Container& c, KeyValues* header = nullptr);
void save_denoiser(const std::filesystem::path& path, const DenoiserModel& model, const KeyValues& extra = {});
DenoiserModel load_denoiser(const std::filesystem::path& path, KeyValues* header = nullptr);

}  // namespace ddae::diffusion
