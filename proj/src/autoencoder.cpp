#include "ldm/autoencoder.hpp"

#include <cmath>
#include <iostream>
#include <string>

#include "ldm/errors.hpp"
#include "ldm/schedules.hpp"

namespace ldm {

namespace F = torch::nn::functional;

void VAEConfig::validate() const {
  if (latent_channels != 4 && latent_channels != 8) {
    throw ConfigError("latent_channels must be 4 or 8, got " + std::to_string(latent_channels));
  }
  if (in_channels < 1) {
    throw ConfigError("in_channels must be positive");
  }
  if (base_width < kNormGroups || base_width % kNormGroups != 0) {
    throw ConfigError("base_width must be a positive multiple of 8");
  }
  if (blocks_per_level < 1) {
    throw ConfigError("blocks_per_level must be >= 1");
  }
}

std::array<int64_t, 3> VAEConfig::widths() const {
  return {base_width, 2 * static_cast<int64_t>(base_width), 4 * static_cast<int64_t>(base_width)};
}

VAEConfig VAEConfig::reference_scale() {
  VAEConfig cfg;
  cfg.in_channels = 3;
  cfg.latent_channels = 4;
  cfg.base_width = 88;
  cfg.blocks_per_level = 2;
  return cfg;
}

VAEImpl::VAEImpl(const VAEConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const auto w = cfg_.widths();
  // Channel width at encoder levels 0..3 (full, 1/2, 1/4, 1/8 resolution).
  const std::array<int64_t, 4> level_width{w[0], w[1], w[2], w[2]};

  enc_in_ = register_module("enc_in", nn::conv3x3(cfg_.in_channels, w[0]));
  int64_t ch = w[0];
  for (std::size_t lvl = 0; lvl < 4; ++lvl) {
    std::vector<nn::ResBlock> blocks;
    for (int b = 0; b < cfg_.blocks_per_level; ++b) {
      blocks.push_back(register_module("enc_l" + std::to_string(lvl) + "_b" + std::to_string(b),
                                       nn::ResBlock(ch, level_width[lvl])));
      ch = level_width[lvl];
    }
    enc_blocks_.push_back(std::move(blocks));
    if (lvl < 3) {
      enc_down_.push_back(register_module("enc_down" + std::to_string(lvl), nn::Downsample(ch)));
    }
  }
  enc_norm_out_ = register_module("enc_norm_out", nn::group_norm(ch));
  enc_out_ = register_module("enc_out", nn::conv3x3(ch, 2 * cfg_.latent_channels));

  // Decoder mirrors the encoder, coarsest level first.
  dec_in_ = register_module("dec_in", nn::conv3x3(cfg_.latent_channels, w[2]));
  ch = w[2];
  for (int idx = 0; idx < 4; ++idx) {
    const auto lvl = static_cast<std::size_t>(3 - idx);
    const int64_t width = level_width[lvl];
    if (idx > 0) {
      dec_up_.push_back(register_module("dec_up" + std::to_string(lvl), nn::Upsample(ch, width)));
      ch = width;
    }
    auto proj = torch::nn::Conv2d(torch::nn::Conv2dOptions(level_width[lvl], width, 1));
    {
      torch::NoGradGuard no_grad;
      proj->weight.zero_();
      proj->bias.zero_();
    }
    skip_proj_.push_back(register_module("skip_proj" + std::to_string(lvl), proj));
    std::vector<nn::ResBlock> blocks;
    for (int b = 0; b < cfg_.blocks_per_level; ++b) {
      blocks.push_back(
          register_module("dec_l" + std::to_string(lvl) + "_b" + std::to_string(b), nn::ResBlock(ch, width)));
    }
    dec_blocks_.push_back(std::move(blocks));
  }
  half_norm_ = register_module("half_norm", nn::group_norm(w[1]));
  half_out_ = register_module("half_out", nn::conv3x3(w[1], cfg_.in_channels));
  full_norm_ = register_module("full_norm", nn::group_norm(w[0]));
  full_out_ = register_module("full_out", nn::conv3x3(w[0], cfg_.in_channels));
}

EncoderOutput VAEImpl::encode(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != cfg_.in_channels) {
    throw ContractError("encode expects [N, " + std::to_string(cfg_.in_channels) + ", H, W] images");
  }
  if (x.size(2) % VAEConfig::kCompressionFactor != 0 || x.size(3) % VAEConfig::kCompressionFactor != 0) {
    throw ContractError("image height and width must be divisible by 8, got " + std::to_string(x.size(2)) + "x" +
                        std::to_string(x.size(3)));
  }
  EncoderOutput out;
  auto h = enc_in_->forward(x);
  for (std::size_t lvl = 0; lvl < enc_blocks_.size(); ++lvl) {
    for (auto& block : enc_blocks_[lvl]) {
      h = block->forward(h);
    }
    out.skips.push_back(h);
    if (lvl < enc_down_.size()) {
      h = enc_down_[lvl]->forward(h);
    }
  }
  auto moments = enc_out_->forward(F::silu(enc_norm_out_->forward(h)));
  auto parts = moments.chunk(2, 1);
  out.mu = parts[0];
  out.logvar = parts[1].clamp(-30.0, 20.0);
  return out;
}

DecoderOutput VAEImpl::decode(const torch::Tensor& z, const std::vector<torch::Tensor>* skips) {
  if (z.dim() != 4 || z.size(1) != cfg_.latent_channels) {
    throw ContractError("decode expects [N, " + std::to_string(cfg_.latent_channels) + ", h, w] latents");
  }
  const bool use_skips = cfg_.skip_connections_enabled && skips != nullptr;
  if (use_skips && skips->size() != 4) {
    throw ContractError("skip connections need four encoder activations");
  }
  DecoderOutput out;
  auto h = dec_in_->forward(z);
  for (std::size_t idx = 0; idx < dec_blocks_.size(); ++idx) {
    const std::size_t lvl = 3 - idx;
    if (idx > 0) {
      h = dec_up_[idx - 1]->forward(h);
    }
    if (use_skips) {
      h = h + skip_proj_[idx]->forward((*skips)[lvl]);
    }
    for (auto& block : dec_blocks_[idx]) {
      h = block->forward(h);
    }
    if (lvl == 1) {
      out.half = torch::tanh(half_out_->forward(F::silu(half_norm_->forward(h))));
    }
  }
  out.full = torch::tanh(full_out_->forward(F::silu(full_norm_->forward(h))));
  return out;
}

torch::Tensor VAEImpl::reconstruct(const torch::Tensor& x) { return decode(encode(x).mu).full; }

torch::Tensor reparameterize(const EncoderOutput& e, torch::Generator& gen) {
  if (!e.mu.sizes().equals(e.logvar.sizes())) {
    throw ContractError("reparameterize: mu and logvar shapes differ");
  }
  return e.mu + torch::exp(0.5 * e.logvar) * make_noise(e.mu, gen);
}

torch::Tensor reparameterize(const EncoderOutput& e, std::uint64_t seed) {
  auto gen = make_generator(seed);
  return reparameterize(e, gen);
}

torch::Tensor kl_loss(const EncoderOutput& e) {
  if (!e.mu.sizes().equals(e.logvar.sizes())) {
    throw ContractError("kl_loss: mu and logvar shapes differ");
  }
  if (torch::isnan(e.mu).any().item<bool>() || torch::isnan(e.logvar).any().item<bool>()) {
    throw NumericError("kl_loss: NaN in encoder output");
  }
  return (-0.5 * (1.0 + e.logvar - e.mu.pow(2) - e.logvar.exp())).mean();
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl(int in_channels, int base_width, int n_layers) : n_layers_(n_layers) {
  if (n_layers < 1 || base_width % nn::kNormGroups != 0) {
    throw ConfigError("discriminator needs n_layers >= 1 and base_width divisible by 8");
  }
  auto conv4 = [](int64_t in, int64_t out, int64_t stride) {
    return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 4).stride(stride).padding(1));
  };
  auto lrelu = [] { return torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)); };
  torch::nn::Sequential seq;
  seq->push_back(conv4(in_channels, base_width, 2));
  seq->push_back(lrelu());
  int64_t ch = base_width;
  for (int i = 1; i < n_layers; ++i) {
    seq->push_back(conv4(ch, ch * 2, 2));
    seq->push_back(nn::group_norm(ch * 2));
    seq->push_back(lrelu());
    ch *= 2;
  }
  seq->push_back(conv4(ch, ch * 2, 1));
  seq->push_back(nn::group_norm(ch * 2));
  seq->push_back(lrelu());
  seq->push_back(conv4(ch * 2, 1, 1));
  body_ = register_module("body", seq);
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& x) {
  // Each stride-2 layer halves the side, each stride-1 layer removes one pixel.
  int64_t side = std::min(x.size(2), x.size(3));
  for (int i = 0; i < n_layers_; ++i) {
    side /= 2;
  }
  if (side - 2 < 1) {
    throw ContractError("input too small for a " + std::to_string(n_layers_) + "-layer patch discriminator");
  }
  return body_->forward(x);
}

int PatchDiscriminatorImpl::receptive_field() const {
  // Walk from the output back to the input: r <- (r - 1) * stride + kernel.
  int r = 1;
  r = (r - 1) * 1 + 4;
  r = (r - 1) * 1 + 4;
  for (int i = 0; i < n_layers_; ++i) {
    r = (r - 1) * 2 + 4;
  }
  return r;
}

AdversarialLosses adversarial_losses_from_logits(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
  AdversarialLosses out;
  out.d_loss = 0.5 * (F::softplus(-real_logits).mean() + F::softplus(fake_logits).mean());
  out.g_loss = F::softplus(-fake_logits).mean();
  return out;
}

AdversarialLosses adversarial_losses(PatchDiscriminator& d, const torch::Tensor& real, const torch::Tensor& fake) {
  if (!real.sizes().equals(fake.sizes())) {
    throw ContractError("adversarial_losses: real and fake batches differ in shape");
  }
  auto real_logits = d->forward(real);
  auto fake_detached = d->forward(fake.detach());
  AdversarialLosses out;
  out.d_loss = 0.5 * (F::softplus(-real_logits).mean() + F::softplus(fake_detached).mean());
  out.g_loss = F::softplus(-d->forward(fake)).mean();
  return out;
}

void LossWeights::validate() const {
  for (double v : {l1, perceptual, ssim, adv, kl}) {
    if (!std::isfinite(v) || v < 0.0) {
      throw ConfigError("loss weights must be finite and non-negative");
    }
  }
}

torch::Tensor downsample_half(const torch::Tensor& x) { return F::avg_pool2d(x, F::AvgPool2dFuncOptions(2)); }

ReconstructionTerms reconstruction_loss(const torch::Tensor& pred_full, const torch::Tensor& pred_half,
                                        const torch::Tensor& target, const LossWeights& w, PatchDiscriminator d,
                                        const FeatureExtractor* extractor, const SsimParams& ssim_params,
                                        bool adversarial_active) {
  w.validate();
  if (w.adv > 0.0 && d.is_empty()) {
    throw ConfigError("adversarial weight > 0 but no discriminator supplied");
  }
  if (!pred_full.sizes().equals(target.sizes())) {
    throw ContractError("reconstruction_loss: full-resolution prediction and target differ in shape");
  }
  const auto target_half = downsample_half(target);
  if (!pred_half.sizes().equals(target_half.sizes())) {
    throw ContractError("reconstruction_loss: half-resolution prediction must be target size / 2");
  }
  if (w.perceptual > 0.0 && extractor == nullptr) {
    static bool noticed = false;
    if (!noticed) {
      std::clog << "[ldm] no feature extractor configured; perceptual loss term skipped\n";
      noticed = true;
    }
  }

  ReconstructionTerms terms;
  terms.total = torch::zeros({}, pred_full.options());
  const std::array<const torch::Tensor*, 2> preds{&pred_full, &pred_half};
  const std::array<const torch::Tensor*, 2> targets{&target, &target_half};
  for (std::size_t head = 0; head < 2; ++head) {
    const auto& p = *preds[head];
    const auto& t = *targets[head];
    if (w.l1 > 0.0) {
      auto l1 = (p - t).abs().mean();
      terms.l1[head] = l1.item<double>();
      terms.total = terms.total + w.l1 * l1;
    }
    if (w.perceptual > 0.0 && extractor != nullptr) {
      auto perc = perceptual_distance(*extractor, p, t).mean();
      terms.perceptual[head] = perc.item<double>();
      terms.total = terms.total + w.perceptual * perc;
    }
    if (w.ssim > 0.0) {
      auto s = ssim(p, t, ssim_params);
      terms.ssim[head] = s.item<double>();
      terms.total = terms.total + w.ssim * (1.0 - s);
    }
    if (w.adv > 0.0 && adversarial_active) {
      auto g = F::softplus(-d->forward(p)).mean();
      terms.adv[head] = g.item<double>();
      terms.total = terms.total + w.adv * g;
    }
  }
  return terms;
}

std::int64_t parameter_count(const torch::nn::Module& m) {
  std::int64_t n = 0;
  for (const auto& p : m.parameters()) {
    n += p.numel();
  }
  return n;
}

}  // namespace ldm
