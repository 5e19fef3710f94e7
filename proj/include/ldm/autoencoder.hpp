#pragma once

#include <torch/torch.h>

#include <array>
#include <optional>
#include <vector>

#include "ldm/feature_extractor.hpp"
#include "ldm/nn_blocks.hpp"
#include "ldm/similarity.hpp"

namespace ldm {

struct VAEConfig {
  static constexpr int kCompressionFactor = 8;
  static constexpr int kNormGroups = nn::kNormGroups;
  static constexpr int kKernel = 3;

  int in_channels = 1;
  int latent_channels = 8;  // 4 or 8
  int base_width = 16;      // stage widths are base, 2*base, 4*base
  int blocks_per_level = 1;
  bool skip_connections_enabled = false;

  void validate() const;
  std::array<int64_t, 3> widths() const;

  /// 4-channel RGB configuration near the 24M-parameter budget of the
  /// reference model; documented, not exercised by the toy experiments.
  static VAEConfig reference_scale();
};

struct EncoderOutput {
  torch::Tensor mu;
  torch::Tensor logvar;
  /// Encoder activations per resolution (full, 1/2, 1/4, 1/8) for the
  /// training-only skip connections.
  std::vector<torch::Tensor> skips;
};

struct DecoderOutput {
  torch::Tensor full;  // [N, C, H, W]
  torch::Tensor half;  // [N, C, H/2, W/2]
};

class VAEImpl : public torch::nn::Module {
 public:
  explicit VAEImpl(const VAEConfig& cfg);

  EncoderOutput encode(const torch::Tensor& x);

  /// Decodes from z alone unless skip connections are enabled in the config
  /// and encoder activations are supplied.
  DecoderOutput decode(const torch::Tensor& z, const std::vector<torch::Tensor>* skips = nullptr);

  /// encode -> decode(mu) without skip connections.
  torch::Tensor reconstruct(const torch::Tensor& x);

  const VAEConfig& config() const noexcept { return cfg_; }

 private:
  VAEConfig cfg_;
  torch::nn::Conv2d enc_in_{nullptr};
  std::vector<std::vector<nn::ResBlock>> enc_blocks_;
  std::vector<nn::Downsample> enc_down_;
  torch::nn::GroupNorm enc_norm_out_{nullptr};
  torch::nn::Conv2d enc_out_{nullptr};

  torch::nn::Conv2d dec_in_{nullptr};
  std::vector<std::vector<nn::ResBlock>> dec_blocks_;  // coarsest level first
  std::vector<nn::Upsample> dec_up_;
  std::vector<torch::nn::Conv2d> skip_proj_;
  torch::nn::GroupNorm half_norm_{nullptr}, full_norm_{nullptr};
  torch::nn::Conv2d half_out_{nullptr}, full_out_{nullptr};
};
TORCH_MODULE(VAE);

/// z = mu + exp(logvar / 2) * n with n ~ N(0, I) from the generator.
torch::Tensor reparameterize(const EncoderOutput& e, torch::Generator& gen);
torch::Tensor reparameterize(const EncoderOutput& e, std::uint64_t seed);

/// Mean over elements of -1/2 (1 + logvar - mu^2 - exp(logvar)).
torch::Tensor kl_loss(const EncoderOutput& e);

/// PatchGAN critic emitting a grid of real/fake logits.
class PatchDiscriminatorImpl : public torch::nn::Module {
 public:
  PatchDiscriminatorImpl(int in_channels, int base_width = 32, int n_layers = 3);

  torch::Tensor forward(const torch::Tensor& x);
  /// Receptive field of one output logit in input pixels.
  int receptive_field() const;

 private:
  int n_layers_;
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

struct AdversarialLosses {
  torch::Tensor d_loss;
  torch::Tensor g_loss;
};

/// Non-saturating BCE on precomputed logits.
AdversarialLosses adversarial_losses_from_logits(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);

/// d_loss = mean of real-as-real and fake-as-fake terms (fake detached);
/// g_loss scores fake-as-real and carries gradient to the fake pixels.
AdversarialLosses adversarial_losses(PatchDiscriminator& d, const torch::Tensor& real, const torch::Tensor& fake);

struct LossWeights {
  double l1 = 1.0;
  double perceptual = 1.0;
  double ssim = 1.0;
  double adv = 0.1;
  double kl = 1e-6;

  void validate() const;
};

struct ReconstructionTerms {
  torch::Tensor total;
  // Per head, index 0 = full resolution, 1 = half resolution.
  std::array<double, 2> l1{};
  std::array<double, 2> perceptual{};
  std::array<double, 2> ssim{};
  std::array<double, 2> adv{};
};

/// 2x2 area-average downsampling.
torch::Tensor downsample_half(const torch::Tensor& x);

/// Sum over {full, half} of l1*L1 + perc*perceptual + ssim*(1 - SSIM) + adv*g_loss.
/// The perceptual term is skipped with a notice when `extractor` is null;
/// `adversarial_active` lets training loops hold the critic back during warm-up.
ReconstructionTerms reconstruction_loss(const torch::Tensor& pred_full, const torch::Tensor& pred_half,
                                        const torch::Tensor& target, const LossWeights& w,
                                        PatchDiscriminator d = nullptr, const FeatureExtractor* extractor = nullptr,
                                        const SsimParams& ssim_params = {}, bool adversarial_active = true);

std::int64_t parameter_count(const torch::nn::Module& m);

}  // namespace ldm
