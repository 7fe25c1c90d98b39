#include "pccforge/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace pccforge {

namespace {

void finish_schedule(DiffusionSchedule& s) {
  s.alpha.resize(s.beta.size());
  s.alpha_bar.resize(s.beta.size());
  double prod = 1.0;
  for (std::size_t i = 0; i < s.beta.size(); ++i) {
    if (!(s.beta[i] > 0.0 && s.beta[i] < 1.0)) throw ConfigError("diffusion schedule: beta outside (0, 1)");
    s.alpha[i] = 1.0 - s.beta[i];
    prod *= s.alpha[i];
    s.alpha_bar[i] = prod;
  }
}

void check_step(Index t, const DiffusionSchedule& s) {
  if (t < 1 || t > s.steps)
    throw SizeError("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(s.steps) + "]");
}

}  // namespace

DiffusionSchedule make_linear_schedule(Index steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("diffusion schedule: step count must be positive");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ConfigError("diffusion schedule: need 0 < beta_start <= beta_end < 1");
  DiffusionSchedule s;
  s.steps = steps;
  s.beta.resize(static_cast<std::size_t>(steps));
  s.timesteps.resize(static_cast<std::size_t>(steps));
  for (Index i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    s.beta[static_cast<std::size_t>(i)] = beta_start + frac * (beta_end - beta_start);
    s.timesteps[static_cast<std::size_t>(i)] = i + 1;
  }
  finish_schedule(s);
  return s;
}

DiffusionSchedule respace(const DiffusionSchedule& base, Index steps) {
  if (steps < 1 || steps > base.steps) throw ConfigError("respace: step count outside [1, base steps]");
  if (steps == base.steps) return base;
  DiffusionSchedule s;
  s.steps = steps;
  double previous = 1.0;
  for (Index i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 1.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    const Index label = 1 + static_cast<Index>(std::llround(frac * static_cast<double>(base.steps - 1)));
    const double abar = base.alpha_bar_at(label);
    s.timesteps.push_back(base.time_label(label));
    s.beta.push_back(1.0 - abar / previous);
    previous = abar;
  }
  finish_schedule(s);
  return s;
}

Points forward_sample(const Points& x0, Index t, const Points& noise, const DiffusionSchedule& schedule) {
  check_step(t, schedule);
  if (noise.rows() != x0.rows()) throw ShapeError("forward_sample: noise shape mismatch");
  const double abar = schedule.alpha_bar_at(t);
  return std::sqrt(abar) * x0 + std::sqrt(1.0 - abar) * noise;
}

Points forward_step(const Points& previous, Index t, const Points& noise, const DiffusionSchedule& schedule) {
  check_step(t, schedule);
  if (noise.rows() != previous.rows()) throw ShapeError("forward_step: noise shape mismatch");
  const double beta = schedule.beta_at(t);
  return std::sqrt(1.0 - beta) * previous + std::sqrt(beta) * noise;
}

// ---------------------------------------------------------------------------------
// Denoiser

MlpSpec DcgSpec::tail() const {
  std::vector<Index> widths(hidden.begin(), hidden.end());
  widths.push_back(3);
  return {"den.tail", widths, false};
}

RowVector time_embedding(Index t, Index dim) {
  RowVector e(dim);
  const Index half = dim / 2;
  for (Index k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
    e(k) = std::sin(static_cast<double>(t) * freq);
    e(half + k) = std::cos(static_cast<double>(t) * freq);
  }
  return e;
}

void init_dcg(ParamStore& params, const DcgSpec& spec, Rng& rng) {
  if (spec.hidden.empty()) throw ConfigError("denoiser needs at least one hidden layer");
  init_pointnet(params, spec.encoder, rng);
  init_dense(params, "den.in", spec.input_dim(), spec.hidden.front(), rng);
  init_mlp(params, spec.tail(), rng, /*zero_last=*/true);
}

Matrix predict_noise(const ParamStore& params, const DcgSpec& spec, const Points& xt, Index time_label,
                     const RowVector& latent, DenoiserCache* cache) {
  if (latent.size() != spec.latent_dim())
    throw ShapeError("denoiser: latent has length " + std::to_string(latent.size()) + ", expected " +
                     std::to_string(spec.latent_dim()));
  const Matrix& w = params.at("den.in.W");
  const Matrix& b = params.at("den.in.b");
  const Index e = spec.time_embed_dim;
  const RowVector emb = time_embedding(time_label, e);
  // Conditioning columns are shared by every point, so fold them into the bias.
  RowVector shift = b.row(0) + emb * w.middleCols(3, e).transpose() + latent * w.rightCols(latent.size()).transpose();
  const Matrix xyz = xt;
  Matrix pre0 = xyz * w.leftCols(3).transpose();
  pre0.rowwise() += shift;
  const Matrix h0 = leaky_relu(pre0);
  Matrix out = mlp_forward(params, spec.tail(), h0, cache ? &cache->tail : nullptr);
  if (cache) {
    cache->xyz = xyz;
    cache->embedding = emb;
    cache->latent = latent;
    cache->pre0 = std::move(pre0);
  }
  return out;
}

RowVector predict_noise_backward(const ParamStore& params, const DcgSpec& spec, const DenoiserCache& cache,
                                 const Matrix& grad_noise, ParamStore& grads) {
  const Matrix g_h0 = mlp_backward(params, spec.tail(), cache.tail, grad_noise, grads);
  const Matrix g_pre0 = leaky_relu_grad(cache.pre0, g_h0);
  const RowVector col = g_pre0.colwise().sum();
  const Index e = spec.time_embed_dim;
  const Index l = cache.latent.size();
  Matrix& gw = grads.at("den.in.W");
  gw.leftCols(3).noalias() += g_pre0.transpose() * cache.xyz;
  gw.middleCols(3, e).noalias() += col.transpose() * cache.embedding;
  gw.rightCols(l).noalias() += col.transpose() * cache.latent;
  grads.at("den.in.b") += col;
  return col * params.at("den.in.W").rightCols(l);
}

Points reverse_mean(const Points& xt, const Matrix& predicted_noise, Index t, const DiffusionSchedule& schedule) {
  check_step(t, schedule);
  const double beta = schedule.beta_at(t);
  const double coef = beta / std::sqrt(1.0 - schedule.alpha_bar_at(t));
  Points mean = xt;
  mean -= coef * predicted_noise;
  return mean / std::sqrt(schedule.alpha_at(t));
}

Points reverse_step(const ParamStore& params, const DcgSpec& spec, const Points& xt, Index t,
                    const RowVector& latent, const DiffusionSchedule& schedule, const Points& noise) {
  check_step(t, schedule);
  if (noise.rows() != xt.rows()) throw ShapeError("reverse_step: noise shape mismatch");
  const Matrix eps = predict_noise(params, spec, xt, schedule.time_label(t), latent);
  Points mean = reverse_mean(xt, eps, t, schedule);
  if (t == 1) return mean;
  return mean + std::sqrt(schedule.beta_at(t)) * noise;
}

Points generate_coarse(const ParamStore& params, const DcgSpec& spec, const Points& partial,
                       const DiffusionSchedule& schedule, std::uint64_t seed) {
  if (partial.rows() == 0) throw SizeError("generate_coarse: empty partial cloud");
  const RowVector z = pointnet_encode(params, spec.encoder, partial);
  Rng rng(seed);
  Points x = standard_normal_points(spec.points, rng);
  for (Index t = schedule.steps; t >= 1; --t) {
    const Points noise = t > 1 ? standard_normal_points(spec.points, rng) : Points::Zero(spec.points, 3);
    x = reverse_step(params, spec, x, t, z, schedule, noise);
  }
  return x;
}

// ---------------------------------------------------------------------------------
// Training

double dcg_batch_loss(const ParamStore& params, const DcgSpec& spec, const DiffusionSchedule& schedule,
                      const std::vector<const ShapePair*>& batch, Index points_per_shape, Rng& rng,
                      ParamStore* grads) {
  std::uniform_int_distribution<Index> pick_t(1, schedule.steps);
  const double count = static_cast<double>(batch.size()) * static_cast<double>(points_per_shape) * 3.0;
  double loss = 0.0;
  std::vector<Index> order;
  for (const ShapePair* sample : batch) {
    const Index n = sample->complete.rows();
    order.resize(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    const Index take = std::min(points_per_shape, n);
    for (Index i = 0; i < take; ++i) {
      std::uniform_int_distribution<Index> pick(i, n - 1);
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick(rng))]);
    }
    Points x0(take, 3);
    for (Index i = 0; i < take; ++i) x0.row(i) = sample->complete.row(order[static_cast<std::size_t>(i)]);

    const Index t = pick_t(rng);
    const Points eps = standard_normal_points(take, rng);
    const Points xt = forward_sample(x0, t, eps, schedule);

    PointNetCache enc_cache;
    DenoiserCache den_cache;
    const RowVector z = pointnet_encode(params, spec.encoder, sample->partial, grads ? &enc_cache : nullptr);
    const Matrix pred = predict_noise(params, spec, xt, schedule.time_label(t), z, grads ? &den_cache : nullptr);
    const Matrix diff = pred - Matrix(eps);
    loss += diff.squaredNorm() / count;
    if (grads) {
      const RowVector gz = predict_noise_backward(params, spec, den_cache, (2.0 / count) * diff, *grads);
      pointnet_backward(params, spec.encoder, enc_cache, gz, *grads);
    }
  }
  return loss;
}

ParamStore train_dcg(const std::vector<ShapePair>& dataset, const DcgSpec& spec, const DiffusionSchedule& schedule,
                     ParamStore params, const DcgTrainOptions& options) {
  if (dataset.empty()) throw SizeError("train_dcg: empty dataset");
  Rng rng(options.seed + static_cast<std::uint64_t>(options.start_step) * 7919u);
  MomentumSgd optimizer(options.learning_rate, options.momentum);
  ParamStore grads = params.zeros_like();
  std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
  std::vector<const ShapePair*> batch;
  for (Index it = 0; it < options.iterations; ++it) {
    batch.clear();
    for (Index b = 0; b < options.batch; ++b) batch.push_back(&dataset[pick(rng)]);
    grads.set_zero();
    const double loss = dcg_batch_loss(params, spec, schedule, batch, options.points_per_shape, rng, &grads);
    const Index step = options.start_step + it + 1;
    if (!std::isfinite(loss)) {
      std::ostringstream os;
      os << "train_dcg: non-finite loss " << loss << " at step " << step << " (gradient norm "
         << std::sqrt(grads.squared_norm()) << ")";
      throw TrainingError(os.str());
    }
    clip_grad_norm(grads, options.grad_clip);
    optimizer.step(params, grads);
    if (options.on_step) options.on_step(step, loss);
  }
  return params;
}

}  // namespace pccforge
