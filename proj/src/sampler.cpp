#include "ldm/sampler.hpp"

#include <cmath>
#include <string>

#include "ldm/errors.hpp"

namespace ldm {

void SamplerConfig::validate(int schedule_steps) const {
  if (steps < 1 || steps > schedule_steps) {
    throw ConfigError("sampling steps must lie in [1, " + std::to_string(schedule_steps) + "], got " +
                      std::to_string(steps));
  }
  if (!(eta >= 0.0 && eta <= 1.0)) {
    throw ConfigError("eta must lie in [0, 1]");
  }
}

EpsModel eps_model(UNet unet) {
  return [unet](const torch::Tensor& x, const torch::Tensor& t, const torch::Tensor& labels) mutable {
    torch::NoGradGuard no_grad;
    unet->eval();
    return unet->forward(x, t, labels);
  };
}

std::vector<int> make_substeps(int total_steps, int sampling_steps) {
  if (sampling_steps < 1 || sampling_steps > total_steps) {
    throw ConfigError("substep count " + std::to_string(sampling_steps) + " must lie in [1, " +
                      std::to_string(total_steps) + "]");
  }
  std::vector<int> taus;
  taus.reserve(static_cast<std::size_t>(sampling_steps));
  const auto T = static_cast<int64_t>(total_steps);
  const auto S = static_cast<int64_t>(sampling_steps);
  for (int64_t i = 1; i <= S; ++i) {
    const auto tau = static_cast<int>((2 * i * T + S) / (2 * S));
    if (!taus.empty() && tau <= taus.back()) {
      throw ConfigError("substep rounding produced a duplicate index");
    }
    taus.push_back(tau);
  }
  return taus;
}

double ddim_sigma(const NoiseSchedule& s, int t, int t_prev, double eta) {
  if (t_prev >= t || t_prev < 0) {
    throw ContractError("DDIM step requires 0 <= t_prev < t");
  }
  if (eta == 0.0) {
    return 0.0;
  }
  const double ab_t = s.alpha_bar(t);
  const double ab_prev = s.alpha_bar(t_prev);
  return eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_prev);
}

torch::Tensor ddim_step(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int t, int t_prev,
                        const NoiseSchedule& s, double eta, const torch::Tensor& noise) {
  const double sigma = ddim_sigma(s, t, t_prev, eta);
  const auto x0_hat = predict_x0_from_eps(x_t, t, eps_hat, s);
  const double ab_prev = s.alpha_bar(t_prev);
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  auto x_prev = x0_hat * std::sqrt(ab_prev) + eps_hat * dir;
  if (sigma > 0.0) {
    if (!noise.defined() || !noise.sizes().equals(x_t.sizes())) {
      throw ContractError("stochastic DDIM step needs a noise tensor shaped like x_t");
    }
    x_prev = x_prev + noise * sigma;
  }
  return x_prev;
}

double ddpm_posterior_variance(const NoiseSchedule& s, int t) {
  if (t < 1 || t > s.steps()) {
    throw IndexError("posterior variance step outside [1, T]");
  }
  return (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t)) * s.beta(t);
}

torch::Tensor ddpm_step(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int t, const NoiseSchedule& s,
                        const torch::Tensor& noise) {
  const double beta = s.beta(t);
  const double mean_coef = beta / std::sqrt(1.0 - s.alpha_bar(t));
  auto mean = (x_t - eps_hat * mean_coef) / std::sqrt(s.alpha(t));
  const double var = ddpm_posterior_variance(s, t);
  if (var > 0.0) {
    mean = mean + noise * std::sqrt(var);
  }
  return mean;
}

namespace {

torch::Tensor step_tensor(int t, int64_t n) { return torch::full({n}, static_cast<int64_t>(t), torch::kLong); }

void check_labels(const torch::Tensor& labels, int64_t n) {
  if (labels.dim() != 1 || labels.size(0) != n) {
    throw ContractError("need one label per requested sample");
  }
}

}  // namespace

torch::Tensor ddim_sample_from(const EpsModel& model, const NoiseSchedule& s, const SamplerConfig& cfg,
                               const torch::Tensor& labels, torch::Tensor x_T) {
  cfg.validate(s.steps());
  check_labels(labels, x_T.size(0));
  const auto taus = make_substeps(s.steps(), cfg.steps);
  // Separate stream for the per-step noise so x_T does not depend on eta.
  auto gen = make_generator(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  auto x = std::move(x_T);
  for (std::size_t i = taus.size(); i-- > 0;) {
    const int t = taus[i];
    const int t_prev = i == 0 ? 0 : taus[i - 1];
    const auto eps_hat = model(x, step_tensor(t, x.size(0)), labels);
    torch::Tensor noise;
    if (cfg.eta > 0.0) {
      noise = make_noise(x, gen);
    }
    x = ddim_step(x, eps_hat, t, t_prev, s, cfg.eta, noise);
  }
  return x;
}

torch::Tensor ddim_sample(const EpsModel& model, const NoiseSchedule& s, const SamplerConfig& cfg,
                          const torch::Tensor& labels, torch::IntArrayRef shape) {
  auto gen = make_generator(cfg.seed);
  auto x_T = torch::randn(shape, gen, torch::kFloat);
  return ddim_sample_from(model, s, cfg, labels, std::move(x_T));
}

torch::Tensor ddpm_sample(const EpsModel& model, const NoiseSchedule& s, std::uint64_t seed,
                          const torch::Tensor& labels, torch::IntArrayRef shape) {
  auto gen = make_generator(seed);
  auto x = torch::randn(shape, gen, torch::kFloat);
  check_labels(labels, x.size(0));
  for (int t = s.steps(); t >= 1; --t) {
    const auto eps_hat = model(x, step_tensor(t, x.size(0)), labels);
    x = ddpm_step(x, eps_hat, t, s, make_noise(x, gen));
  }
  return x;
}

torch::Tensor generate(LatentDiffusion& pipeline, const SamplerConfig& cfg, const torch::Tensor& labels) {
  if (pipeline.vae.is_empty() || pipeline.unet.is_empty()) {
    throw ConfigError("generate needs both an autoencoder and a denoiser");
  }
  const auto& vcfg = pipeline.vae->config();
  if (vcfg.skip_connections_enabled) {
    throw ConfigError("generation decodes from z alone; disable autoencoder skip connections");
  }
  const int64_t side = pipeline.image_size / VAEConfig::kCompressionFactor;
  const std::vector<int64_t> shape{labels.size(0), vcfg.latent_channels, side, side};
  auto z = ddim_sample(eps_model(pipeline.unet), pipeline.schedule, cfg, labels, shape);
  torch::NoGradGuard no_grad;
  pipeline.vae->eval();
  return pipeline.vae->decode(z / pipeline.latent_scale).full;
}

}  // namespace ldm
