#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "ldm/autoencoder.hpp"
#include "ldm/checkpoint.hpp"
#include "ldm/datapipe.hpp"
#include "ldm/denoiser.hpp"
#include "ldm/feature_extractor.hpp"
#include "ldm/metrics.hpp"
#include "ldm/sampler.hpp"
#include "ldm/schedules.hpp"

namespace ldm {

struct TrainConfig {
  int phase = 1;
  double lr = 1e-4;  // phase 2 default is 2e-4, see defaults_for_phase
  double beta1 = 0.9;
  double beta2 = 0.999;
  int batch_size = 32;
  int steps = 1000;
  double ema_decay = 0.0;  // phase 2 only; 0 disables
  std::uint64_t seed = 0;
  LossWeights weights;     // phase 1 only
  int disc_warmup = 500;   // steps before the critic and its loss term start
  double disc_lr = 1e-4;
  int checkpoint_every = 0;  // 0 disables intermediate checkpoints
  std::filesystem::path checkpoint_dir;

  static TrainConfig defaults_for_phase(int phase);
  void validate() const;
};

struct Phase1Log {
  int step = 0;
  double reconstruction = 0.0;
  double kl = 0.0;
  double disc = 0.0;
};

struct Phase1Result {
  VAE vae{nullptr};
  PatchDiscriminator disc{nullptr};
  Checkpoint checkpoint;
  std::vector<Phase1Log> history;
};

/// Phase 1: autoencoder with the multi-resolution reconstruction loss plus
/// KL; the patch critic joins after `disc_warmup` steps when weights.adv > 0.
Phase1Result train_phase1(const TrainConfig& cfg, const VAEConfig& vae_cfg, const torch::Tensor& images,
                          const FeatureExtractor* perceptual = nullptr, const SsimParams& ssim_params = {});

struct Phase2Result {
  LatentDiffusion pipeline;
  Checkpoint checkpoint;
  std::vector<double> history;  // diffusion loss per step
  std::string vae_hash_before;
  std::string vae_hash_after;
};

/// Phase 2: frozen autoencoder, UNet trained on eps-prediction MSE with t
/// drawn uniformly from 1..T per item.
Phase2Result train_phase2(const TrainConfig& cfg, const UNetConfig& unet_cfg, const Checkpoint& vae_checkpoint,
                          const torch::Tensor& images, const torch::Tensor& labels,
                          const ScheduleConfig& schedule = {});

VAE vae_from_checkpoint(const Checkpoint& ckpt);
LatentDiffusion pipeline_from_checkpoint(const Checkpoint& ckpt);

/// Image batch -> reconstruction of the same shape.
using ReconstructFn = std::function<torch::Tensor(const torch::Tensor&)>;
ReconstructFn vae_reconstructor(VAE vae);

struct ReconstructionReport {
  MeanStd ms_ssim;
  MeanStd mse_1e5;  // on [0, 1] images, 1e-5 units
  int scales = 0;
  std::vector<double> ms_ssim_values;
  std::vector<double> mse_values;
};

/// Per-image MS-SSIM and MSE between inputs and reconstructions.
ReconstructionReport eval_reconstruction(const ReconstructFn& reconstruct, const torch::Tensor& images,
                                         int64_t batch = 128);

/// labels [N] + seed -> generated images [N, C, H, W].
using GenerateFn = std::function<torch::Tensor(const torch::Tensor& labels, std::uint64_t seed)>;
GenerateFn pipeline_generator(LatentDiffusion pipeline, SamplerConfig sampler, int64_t batch = 256);

/// Generates one sample per reference item with matching labels, then
/// FID / precision / recall against the reference images.
MetricReport eval_generation(const GenerateFn& generate, const torch::Tensor& ref_images, const torch::Tensor& ref_labels,
                             const FeatureExtractor& f, const PRConfig& pr, std::uint64_t seed,
                             const std::string& reference_descriptor = "");

struct SweepRow {
  int setting = 0;
  std::uint64_t seed = 0;
  double fid = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

struct SweepResult {
  std::string setting_name = "steps";
  std::vector<SweepRow> rows;

  /// Columns `setting,seed,fid,precision,recall`.
  std::string to_csv() const;
  /// FID against setting: one marker per row, median line across seeds.
  std::string to_svg() const;
  double median_fid(int setting) const;
};

/// Builds a generator for a given number of DDIM steps.
using StepsGeneratorFactory = std::function<GenerateFn(int steps)>;

SweepResult steps_sweep(const StepsGeneratorFactory& factory, const std::vector<int>& steps_list,
                        const std::vector<std::uint64_t>& seeds, const torch::Tensor& ref_images,
                        const torch::Tensor& ref_labels, const FeatureExtractor& f, const PRConfig& pr = {});

struct ChannelStudyRow {
  int latent_channels = 0;
  int steps = 0;
  double compression_ratio = 0.0;  // input elements / latent elements
  MeanStd ms_ssim;
  MeanStd mse_1e5;
};

struct ChannelStudyReport {
  std::vector<ChannelStudyRow> rows;
  std::string to_csv() const;
};

/// input elements per latent element: C * H * W / (c * H/8 * W/8).
double compression_ratio(int image_channels, int latent_channels);

/// Trains both autoencoders under the same budget and seed and evaluates
/// reconstruction on `eval_images`.
ChannelStudyReport channel_study(const torch::Tensor& train_images, const torch::Tensor& eval_images,
                                 const VAEConfig& cfg4, const VAEConfig& cfg8, const TrainConfig& train,
                                 const FeatureExtractor* perceptual = nullptr, const SsimParams& ssim_params = {});

/// ISO-8601 UTC wall clock, for report metadata only.
std::string utc_timestamp();

}  // namespace ldm
