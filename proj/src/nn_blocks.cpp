#include "ldm/nn_blocks.hpp"

#include <cmath>

#include "ldm/errors.hpp"

namespace ldm::nn {

namespace F = torch::nn::functional;

torch::nn::GroupNorm group_norm(int64_t channels) {
  if (channels % kNormGroups != 0) {
    throw ConfigError("GroupNorm(8) requires channel counts divisible by 8, got " + std::to_string(channels));
  }
  return torch::nn::GroupNorm(torch::nn::GroupNormOptions(kNormGroups, channels).eps(1e-6));
}

torch::nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

ResBlockImpl::ResBlockImpl(int64_t in, int64_t out, int64_t embed_dim)
    : norm1_(register_module("norm1", group_norm(in))),
      norm2_(register_module("norm2", group_norm(out))),
      conv1_(register_module("conv1", conv3x3(in, out))),
      conv2_(register_module("conv2", conv3x3(out, out))) {
  if (embed_dim > 0) {
    emb_proj_ = register_module("emb_proj", torch::nn::Linear(embed_dim, out));
  }
  if (in != out) {
    shortcut_ = register_module("shortcut", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1)));
  }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb) {
  auto h = conv1_->forward(F::silu(norm1_->forward(x)));
  if (emb_proj_) {
    if (!emb.defined()) {
      throw ContractError("residual block expects a conditioning embedding");
    }
    h = h + emb_proj_->forward(F::silu(emb)).unsqueeze(-1).unsqueeze(-1);
  }
  h = conv2_->forward(F::silu(norm2_->forward(h)));
  return (shortcut_ ? shortcut_->forward(x) : x) + h;
}

DownsampleImpl::DownsampleImpl(int64_t channels) : conv_(register_module("conv", conv3x3(channels, channels, 2))) {}

torch::Tensor DownsampleImpl::forward(const torch::Tensor& x) { return conv_->forward(x); }

UpsampleImpl::UpsampleImpl(int64_t in, int64_t out) : conv_(register_module("conv", conv3x3(in, out))) {}

torch::Tensor UpsampleImpl::forward(const torch::Tensor& x) {
  auto up = F::interpolate(x, F::InterpolateFuncOptions()
                                  .scale_factor(std::vector<double>{2.0, 2.0})
                                  .mode(torch::kNearest));
  return conv_->forward(up);
}

SelfAttentionImpl::SelfAttentionImpl(int64_t channels)
    : norm_(register_module("norm", group_norm(channels))),
      qkv_(register_module("qkv", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, 3 * channels, 1)))),
      proj_(register_module("proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 1)))) {}

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x) {
  const auto n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  auto qkv = qkv_->forward(norm_->forward(x)).view({n, 3, c, h * w});
  auto q = qkv.select(1, 0).transpose(1, 2);  // [n, hw, c]
  auto k = qkv.select(1, 1);                  // [n, c, hw]
  auto v = qkv.select(1, 2).transpose(1, 2);  // [n, hw, c]
  auto attn = torch::softmax(torch::bmm(q, k) / std::sqrt(static_cast<double>(c)), -1);
  auto out = torch::bmm(attn, v).transpose(1, 2).reshape({n, c, h, w});
  return x + proj_->forward(out);
}

}  // namespace ldm::nn
