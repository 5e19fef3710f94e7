#include "ldm/features.hpp"

#include "ldm/errors.hpp"
#include "ldm/hashing.hpp"
#include "ldm/nn_blocks.hpp"
#include "ldm/schedules.hpp"

namespace ldm {

namespace F = torch::nn::functional;

torch::Tensor perceptual_distance(const FeatureExtractor& f, const torch::Tensor& a, const torch::Tensor& b) {
  if (!a.sizes().equals(b.sizes())) {
    throw ContractError("perceptual_distance: shape mismatch");
  }
  const auto fa = f.activations(a);
  const auto fb = f.activations(b);
  torch::Tensor total;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    auto na = fa[i] / (fa[i].pow(2).sum(1, true) + 1e-10).sqrt();
    auto nb = fb[i] / (fb[i].pow(2).sum(1, true) + 1e-10).sqrt();
    auto layer = (na - nb).pow(2).sum(1).flatten(1).mean(1);
    total = total.defined() ? total + layer : layer;
  }
  return total / static_cast<double>(fa.size());
}

ConvFeatureNetImpl::ConvFeatureNetImpl(const FeatureNetConfig& cfg) : cfg_(cfg) {
  if (cfg_.widths.empty()) {
    throw ConfigError("feature net needs at least one stage");
  }
  int64_t ch = cfg_.in_channels;
  for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
    const int64_t w = cfg_.widths[i];
    torch::nn::Sequential stage(nn::conv3x3(ch, w), nn::group_norm(w), torch::nn::SiLU(), nn::conv3x3(w, w),
                                nn::group_norm(w), torch::nn::SiLU());
    stages_.push_back(register_module("stage" + std::to_string(i), stage));
    ch = w;
  }
  head_ = register_module("head", torch::nn::Linear(ch, cfg_.num_classes));
}

std::vector<torch::Tensor> ConvFeatureNetImpl::stages(const torch::Tensor& x) {
  std::vector<torch::Tensor> maps;
  auto h = x;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    if (i > 0) {
      h = F::avg_pool2d(h, F::AvgPool2dFuncOptions(2));
    }
    h = stages_[i]->forward(h);
    maps.push_back(h);
  }
  return maps;
}

torch::Tensor ConvFeatureNetImpl::embed(const torch::Tensor& x) { return stages(x).back().mean({2, 3}); }

torch::Tensor ConvFeatureNetImpl::logits(const torch::Tensor& x) { return head_->forward(embed(x)); }

double train_classifier(ConvFeatureNet& net, const torch::Tensor& images, const torch::Tensor& labels,
                        const ClassifierTrainConfig& cfg) {
  if (images.size(0) != labels.size(0) || images.size(0) == 0) {
    throw ContractError("classifier training needs one label per image");
  }
  net->train();
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(cfg.lr));
  auto gen = make_generator(cfg.seed);
  const int64_t n = images.size(0);
  const int64_t batch = std::min<int64_t>(cfg.batch_size, n);
  for (int step = 0; step < cfg.steps; ++step) {
    auto idx = torch::randint(n, {batch}, gen, torch::kLong);
    auto loss = F::cross_entropy(net->logits(images.index_select(0, idx)), labels.index_select(0, idx));
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  net->eval();
  auto pred = classify(net, images);
  return pred.eq(labels).to(torch::kDouble).mean().item<double>();
}

torch::Tensor classify(ConvFeatureNet& net, const torch::Tensor& images, int64_t batch) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> out;
  for (int64_t s = 0; s < images.size(0); s += batch) {
    out.push_back(net->logits(images.narrow(0, s, std::min(batch, images.size(0) - s))).argmax(1));
  }
  return out.empty() ? torch::empty({0}, torch::kLong) : torch::cat(out);
}

ConvFeatureExtractor::ConvFeatureExtractor(ConvFeatureNet net, std::string name) : net_(std::move(net)) {
  net_->eval();
  for (auto& p : net_->parameters()) {
    p.set_requires_grad(false);
  }
  descriptor_ = name + ":d" + std::to_string(dim()) + ":" + hash_module(*net_);
}

torch::Tensor ConvFeatureExtractor::features(const torch::Tensor& images) const { return net_->embed(images); }

std::vector<torch::Tensor> ConvFeatureExtractor::activations(const torch::Tensor& images) const {
  return net_->stages(images);
}

int64_t ConvFeatureExtractor::dim() const { return net_->config().widths.back(); }

std::string ConvFeatureExtractor::descriptor() const { return descriptor_; }

}  // namespace ldm
