#include "ldm/denoiser.hpp"

#include <cmath>
#include <string>

#include "ldm/errors.hpp"

namespace ldm {

namespace F = torch::nn::functional;

void UNetConfig::validate() const {
  if (widths.empty()) {
    throw ConfigError("UNet needs at least one level");
  }
  for (int w : widths) {
    if (w < kNormGroups || w % kNormGroups != 0) {
      throw ConfigError("UNet widths must be positive multiples of 8");
    }
  }
  if (latent_channels < 1 || blocks_per_level < 1 || num_classes < 1) {
    throw ConfigError("UNet latent_channels, blocks_per_level and num_classes must be positive");
  }
  if (embed_dim < 2 || embed_dim % 2 != 0) {
    throw ConfigError("embed_dim must be even, got " + std::to_string(embed_dim));
  }
}

void UNetConfig::check_latent(int64_t height, int64_t width) const {
  const int64_t div = int64_t{1} << (levels() - 1);
  if (height % div != 0 || width % div != 0) {
    throw ContractError("latent side must be divisible by " + std::to_string(div));
  }
}

torch::Tensor sinusoidal_embedding(const torch::Tensor& t, int embed_dim) {
  if (embed_dim < 2 || embed_dim % 2 != 0) {
    throw ConfigError("embed_dim must be even, got " + std::to_string(embed_dim));
  }
  const int half = embed_dim / 2;
  auto i = torch::arange(half, torch::kDouble);
  auto freqs = torch::exp(-std::log(10000.0) * 2.0 * i / static_cast<double>(embed_dim));
  auto args = t.to(torch::kDouble).unsqueeze(1) * freqs.unsqueeze(0);  // [N, half]
  auto emb = torch::stack({torch::sin(args), torch::cos(args)}, 2);     // [N, half, 2]
  return emb.reshape({t.size(0), embed_dim}).to(torch::kFloat);
}

torch::Tensor sinusoidal_embedding(int t, int embed_dim) {
  if (t < 0) {
    throw IndexError("time step must be non-negative");
  }
  return sinusoidal_embedding(torch::tensor({static_cast<int64_t>(t)}), embed_dim).squeeze(0);
}

UNetImpl::UNetImpl(const UNetConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int64_t e = cfg_.embed_dim;
  time_fc1_ = register_module("time_fc1", torch::nn::Linear(e, e));
  time_fc2_ = register_module("time_fc2", torch::nn::Linear(e, e));
  label_embed_ = register_module("label_embed", torch::nn::Embedding(cfg_.num_classes, e));

  const auto levels = static_cast<std::size_t>(cfg_.levels());
  conv_in_ = register_module("conv_in", nn::conv3x3(cfg_.latent_channels, cfg_.widths[0]));

  std::vector<int64_t> skip_channels{cfg_.widths[0]};
  int64_t ch = cfg_.widths[0];
  for (std::size_t lvl = 0; lvl < levels; ++lvl) {
    const int64_t width = cfg_.widths[lvl];
    std::vector<nn::ResBlock> blocks;
    for (int b = 0; b < cfg_.blocks_per_level; ++b) {
      blocks.push_back(
          register_module("down_l" + std::to_string(lvl) + "_b" + std::to_string(b), nn::ResBlock(ch, width, e)));
      ch = width;
      skip_channels.push_back(ch);
    }
    down_blocks_.push_back(std::move(blocks));
    if (lvl + 1 < levels) {
      downs_.push_back(register_module("down" + std::to_string(lvl), nn::Downsample(ch)));
      skip_channels.push_back(ch);
    }
  }

  mid1_ = register_module("mid1", nn::ResBlock(ch, ch, e));
  if (cfg_.attention) {
    mid_attn_ = register_module("mid_attn", nn::SelfAttention(ch));
  }
  mid2_ = register_module("mid2", nn::ResBlock(ch, ch, e));

  for (std::size_t idx = 0; idx < levels; ++idx) {
    const std::size_t lvl = levels - 1 - idx;
    const int64_t width = cfg_.widths[lvl];
    std::vector<nn::ResBlock> blocks;
    for (int b = 0; b <= cfg_.blocks_per_level; ++b) {
      const int64_t skip = skip_channels.back();
      skip_channels.pop_back();
      blocks.push_back(register_module("up_l" + std::to_string(lvl) + "_b" + std::to_string(b),
                                       nn::ResBlock(ch + skip, width, e)));
      ch = width;
    }
    up_blocks_.push_back(std::move(blocks));
    if (lvl > 0) {
      ups_.push_back(register_module("up" + std::to_string(lvl), nn::Upsample(ch, ch)));
    }
  }
  norm_out_ = register_module("norm_out", nn::group_norm(ch));
  conv_out_ = register_module("conv_out", nn::conv3x3(ch, cfg_.latent_channels));
}

torch::Tensor UNetImpl::time_embedding(const torch::Tensor& t) {
  auto base = sinusoidal_embedding(t, cfg_.embed_dim).to(time_fc1_->weight.scalar_type());
  return time_fc2_->forward(F::silu(time_fc1_->forward(base)));
}

torch::Tensor UNetImpl::condition(const torch::Tensor& t, const torch::Tensor& labels) {
  if (labels.dim() != 1 || labels.size(0) != t.size(0)) {
    throw ContractError("need one label per batch item");
  }
  if (labels.numel() > 0 && (labels.min().item<int64_t>() < 0 || labels.max().item<int64_t>() >= cfg_.num_classes)) {
    throw ContractError("class label outside [0, " + std::to_string(cfg_.num_classes) + ")");
  }
  return time_embedding(t) + label_embed_->forward(labels);
}

torch::Tensor UNetImpl::forward(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& labels) {
  if (z_t.dim() != 4 || z_t.size(1) != cfg_.latent_channels) {
    throw ContractError("UNet expects [N, " + std::to_string(cfg_.latent_channels) + ", h, w] latents");
  }
  if (t.dim() != 1 || t.size(0) != z_t.size(0)) {
    throw ContractError("need one time step per batch item");
  }
  cfg_.check_latent(z_t.size(2), z_t.size(3));
  const auto emb = condition(t, labels);

  std::vector<torch::Tensor> skips;
  auto h = conv_in_->forward(z_t);
  skips.push_back(h);
  for (std::size_t lvl = 0; lvl < down_blocks_.size(); ++lvl) {
    for (auto& block : down_blocks_[lvl]) {
      h = block->forward(h, emb);
      skips.push_back(h);
    }
    if (lvl < downs_.size()) {
      h = downs_[lvl]->forward(h);
      skips.push_back(h);
    }
  }
  h = mid1_->forward(h, emb);
  if (mid_attn_) {
    h = mid_attn_->forward(h);
  }
  h = mid2_->forward(h, emb);
  for (std::size_t idx = 0; idx < up_blocks_.size(); ++idx) {
    for (auto& block : up_blocks_[idx]) {
      h = block->forward(torch::cat({h, skips.back()}, 1), emb);
      skips.pop_back();
    }
    if (idx < ups_.size()) {
      h = ups_[idx]->forward(h);
    }
  }
  return conv_out_->forward(F::silu(norm_out_->forward(h)));
}

torch::Tensor diffusion_loss(const torch::Tensor& eps_hat, const torch::Tensor& eps) {
  if (!eps_hat.sizes().equals(eps.sizes())) {
    throw ContractError("diffusion_loss: prediction and target differ in shape");
  }
  return (eps_hat - eps).pow(2).mean();
}

}  // namespace ldm
