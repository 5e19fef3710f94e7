#pragma once

#include <torch/torch.h>

#include <vector>

#include "ldm/nn_blocks.hpp"

namespace ldm {

struct UNetConfig {
  static constexpr int kNormGroups = nn::kNormGroups;
  static constexpr int kKernel = 3;

  int latent_channels = 8;
  std::vector<int> widths{64, 128};  // one entry per level
  int blocks_per_level = 2;
  int embed_dim = 128;
  int num_classes = 2;
  bool attention = false;  // self-attention at the lowest resolution

  int levels() const noexcept { return static_cast<int>(widths.size()); }
  void validate() const;
  /// Throws unless the latent side is divisible by 2^(levels - 1).
  void check_latent(int64_t height, int64_t width) const;
};

/// Sinusoidal position encoding, interleaved (sin, cos) pairs with
/// frequencies 10000^(-2i/d). Shape [N, d] for a [N] step tensor.
torch::Tensor sinusoidal_embedding(const torch::Tensor& t, int embed_dim);
torch::Tensor sinusoidal_embedding(int t, int embed_dim);

/// Class- and time-conditional UNet predicting the injected noise.
class UNetImpl : public torch::nn::Module {
 public:
  explicit UNetImpl(const UNetConfig& cfg);

  /// z_t [N, c, h, w]; t and labels int64 [N].
  torch::Tensor forward(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& labels);

  /// Time embedding through the learned linear map, [N, embed_dim].
  torch::Tensor time_embedding(const torch::Tensor& t);
  /// Combined time + label conditioning vector, [N, embed_dim].
  torch::Tensor condition(const torch::Tensor& t, const torch::Tensor& labels);

  const UNetConfig& config() const noexcept { return cfg_; }

 private:
  UNetConfig cfg_;
  torch::nn::Linear time_fc1_{nullptr}, time_fc2_{nullptr};
  torch::nn::Embedding label_embed_{nullptr};
  torch::nn::Conv2d conv_in_{nullptr};
  std::vector<std::vector<nn::ResBlock>> down_blocks_;
  std::vector<nn::Downsample> downs_;
  nn::ResBlock mid1_{nullptr}, mid2_{nullptr};
  nn::SelfAttention mid_attn_{nullptr};
  std::vector<std::vector<nn::ResBlock>> up_blocks_;
  std::vector<nn::Upsample> ups_;
  torch::nn::GroupNorm norm_out_{nullptr};
  torch::nn::Conv2d conv_out_{nullptr};
};
TORCH_MODULE(UNet);

/// Mean squared error between predicted and injected noise.
torch::Tensor diffusion_loss(const torch::Tensor& eps_hat, const torch::Tensor& eps);

}  // namespace ldm
