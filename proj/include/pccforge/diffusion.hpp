#pragma once

#include <functional>
#include <vector>

#include "pccforge/nn.hpp"
#include "pccforge/types.hpp"

namespace pccforge {

/// Noise schedule. Vectors are indexed by step-1; `timesteps` maps a schedule step to
/// the time label the denoiser was trained with (identity unless respaced).
struct DiffusionSchedule {
  Index steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<Index> timesteps;

  double beta_at(Index t) const { return beta[static_cast<std::size_t>(t - 1)]; }
  double alpha_at(Index t) const { return alpha[static_cast<std::size_t>(t - 1)]; }
  double alpha_bar_at(Index t) const { return alpha_bar[static_cast<std::size_t>(t - 1)]; }
  Index time_label(Index t) const { return timesteps[static_cast<std::size_t>(t - 1)]; }
};

/// Linear betas from beta_start to beta_end inclusive.
DiffusionSchedule make_linear_schedule(Index steps, double beta_start = 1e-4, double beta_end = 0.02);

/// Strided sampling schedule over `steps` evenly spaced time labels of `base`, with
/// betas recomputed so the cumulative products match the base schedule at those labels.
DiffusionSchedule respace(const DiffusionSchedule& base, Index steps);

/// Closed-form q(x_t | x_0): sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.
Points forward_sample(const Points& x0, Index t, const Points& noise, const DiffusionSchedule& schedule);

/// One application of the single-step kernel q(x_t | x_{t-1}).
Points forward_step(const Points& previous, Index t, const Points& noise, const DiffusionSchedule& schedule);

// ---------------------------------------------------------------------------------
// Conditional denoiser

struct DcgSpec {
  PointNetSpec encoder;
  Index time_embed_dim = 32;
  std::vector<Index> hidden{128, 256, 256};
  Index points = 2048;

  Index latent_dim() const { return encoder.latent_dim(); }
  Index input_dim() const { return 3 + time_embed_dim + latent_dim(); }
  MlpSpec tail() const;
};

/// Sinusoidal embedding of an integer time label.
RowVector time_embedding(Index t, Index dim);

void init_dcg(ParamStore& params, const DcgSpec& spec, Rng& rng);

struct DenoiserCache {
  Matrix xyz;
  RowVector embedding;
  RowVector latent;
  Matrix pre0;
  MlpCache tail;
};

/// Per-point noise prediction from (coordinates, time embedding, latent).
Matrix predict_noise(const ParamStore& params, const DcgSpec& spec, const Points& xt, Index time_label,
                     const RowVector& latent, DenoiserCache* cache = nullptr);
/// Accumulates parameter gradients and returns dL/d(latent).
RowVector predict_noise_backward(const ParamStore& params, const DcgSpec& spec, const DenoiserCache& cache,
                                 const Matrix& grad_noise, ParamStore& grads);

/// Posterior mean of x_{t-1} from the predicted noise.
Points reverse_mean(const Points& xt, const Matrix& predicted_noise, Index t, const DiffusionSchedule& schedule);

/// x_{t-1} ~ N(mu_theta(x_t, t, z), beta_t I) using the supplied standard normal draw.
/// Step t = 1 returns the mean.
Points reverse_step(const ParamStore& params, const DcgSpec& spec, const Points& xt, Index t,
                    const RowVector& latent, const DiffusionSchedule& schedule, const Points& noise);

/// Encodes the partial cloud and runs the full reverse chain from Gaussian noise.
Points generate_coarse(const ParamStore& params, const DcgSpec& spec, const Points& partial,
                       const DiffusionSchedule& schedule, std::uint64_t seed);

// ---------------------------------------------------------------------------------
// Training

struct ShapePair {
  Points partial;
  Points complete;
};

struct DcgTrainOptions {
  Index iterations = 1000;
  Index batch = 8;
  Index points_per_shape = 512;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double grad_clip = 1.0;
  std::uint64_t seed = 1;
  Index start_step = 0;
  /// Called after every step with (global step, loss).
  std::function<void(Index, double)> on_step;
};

/// Noise-prediction MSE for a batch (mean over points and coordinates), with gradients
/// accumulated into `grads`.
double dcg_batch_loss(const ParamStore& params, const DcgSpec& spec, const DiffusionSchedule& schedule,
                      const std::vector<const ShapePair*>& batch, Index points_per_shape, Rng& rng,
                      ParamStore* grads);

/// Trains encoder and denoiser jointly; returns the updated parameters.
ParamStore train_dcg(const std::vector<ShapePair>& dataset, const DcgSpec& spec, const DiffusionSchedule& schedule,
                     ParamStore params, const DcgTrainOptions& options);

}  // namespace pccforge
