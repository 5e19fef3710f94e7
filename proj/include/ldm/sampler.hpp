#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <vector>

#include "ldm/autoencoder.hpp"
#include "ldm/denoiser.hpp"
#include "ldm/schedules.hpp"

namespace ldm {

struct SamplerConfig {
  int steps = 150;
  double eta = 0.0;
  std::uint64_t seed = 0;

  void validate(int schedule_steps) const;
};

/// Noise predictor eps_hat(x_t, t, labels); t and labels are int64 [N].
using EpsModel = std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&, const torch::Tensor&)>;

/// Wraps a UNet in eval mode, no autograd.
EpsModel eps_model(UNet unet);

/// Uniform substeps tau_i = round(i * T / S), i = 1..S (half rounds up).
std::vector<int> make_substeps(int total_steps, int sampling_steps);

/// sigma for the DDIM update between t and t_prev (t_prev < t, ᾱ at 0 is 1).
double ddim_sigma(const NoiseSchedule& s, int t, int t_prev, double eta);

/// One DDIM update from step t to t_prev. `noise` is only read when sigma > 0.
torch::Tensor ddim_step(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int t, int t_prev,
                        const NoiseSchedule& s, double eta, const torch::Tensor& noise = {});

/// Posterior variance (1 - ᾱ_{t-1}) / (1 - ᾱ_t) * beta_t; zero at t = 1.
double ddpm_posterior_variance(const NoiseSchedule& s, int t);

/// One ancestral update from t to t - 1.
torch::Tensor ddpm_step(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int t, const NoiseSchedule& s,
                        const torch::Tensor& noise);

/// Reverse trajectory from seeded x_T ~ N(0, I) down the substep list.
/// `shape` is the latent shape [N, c, h, w]; labels has N entries.
torch::Tensor ddim_sample(const EpsModel& model, const NoiseSchedule& s, const SamplerConfig& cfg,
                          const torch::Tensor& labels, torch::IntArrayRef shape);

/// Same, starting from a caller-supplied x_T.
torch::Tensor ddim_sample_from(const EpsModel& model, const NoiseSchedule& s, const SamplerConfig& cfg,
                               const torch::Tensor& labels, torch::Tensor x_T);

/// Full-T ancestral sampling.
torch::Tensor ddpm_sample(const EpsModel& model, const NoiseSchedule& s, std::uint64_t seed,
                          const torch::Tensor& labels, torch::IntArrayRef shape);

/// Pipeline state needed to turn latent samples into images.
struct LatentDiffusion {
  VAE vae{nullptr};
  UNet unet{nullptr};
  NoiseSchedule schedule = make_linear_schedule();
  /// Multiplies encoder latents before diffusion; decode divides it back out.
  double latent_scale = 1.0;
  int64_t image_size = 32;
};

/// ddim_sample then decode(z / latent_scale).full; images in [-1, 1].
torch::Tensor generate(LatentDiffusion& pipeline, const SamplerConfig& cfg, const torch::Tensor& labels);

}  // namespace ldm
