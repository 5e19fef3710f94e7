#pragma once

// Building blocks shared by the autoencoder and the denoiser: every block is
// 3x3 conv + GroupNorm(8) + Swish unless stated otherwise.

#include <torch/torch.h>

namespace ldm::nn {

inline constexpr int kNormGroups = 8;

torch::nn::GroupNorm group_norm(int64_t channels);
torch::nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride = 1);

/// Residual block: GN-Swish-Conv, optional additive embedding, GN-Swish-Conv,
/// plus a 1x1 projection on the shortcut when channel counts differ.
class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int64_t in, int64_t out, int64_t embed_dim = 0);

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb = {});

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::Linear emb_proj_{nullptr};
  torch::nn::Conv2d shortcut_{nullptr};
};
TORCH_MODULE(ResBlock);

/// Stride-2 3x3 convolution.
class DownsampleImpl : public torch::nn::Module {
 public:
  explicit DownsampleImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv_{nullptr};
};
TORCH_MODULE(Downsample);

/// Nearest-neighbour x2 upsampling followed by a 3x3 convolution.
class UpsampleImpl : public torch::nn::Module {
 public:
  UpsampleImpl(int64_t in, int64_t out);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv_{nullptr};
};
TORCH_MODULE(Upsample);

/// Single-head spatial self-attention with a residual connection.
class SelfAttentionImpl : public torch::nn::Module {
 public:
  explicit SelfAttentionImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::GroupNorm norm_{nullptr};
  torch::nn::Conv2d qkv_{nullptr}, proj_{nullptr};
};
TORCH_MODULE(SelfAttention);

}  // namespace ldm::nn
