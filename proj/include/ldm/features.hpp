#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

#include "ldm/feature_extractor.hpp"

namespace ldm {

struct FeatureNetConfig {
  int in_channels = 1;
  std::vector<int> widths{16, 32, 64};  // final width is the feature dimension
  int num_classes = 2;
};

/// Small convolutional classifier. Its globally pooled last stage is the
/// feature vector; per-stage maps feed the perceptual distance.
class ConvFeatureNetImpl : public torch::nn::Module {
 public:
  explicit ConvFeatureNetImpl(const FeatureNetConfig& cfg);

  std::vector<torch::Tensor> stages(const torch::Tensor& x);
  torch::Tensor embed(const torch::Tensor& x);
  torch::Tensor logits(const torch::Tensor& x);

  const FeatureNetConfig& config() const noexcept { return cfg_; }

 private:
  FeatureNetConfig cfg_;
  std::vector<torch::nn::Sequential> stages_;
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(ConvFeatureNet);

struct ClassifierTrainConfig {
  int steps = 400;
  int batch_size = 64;
  double lr = 2e-3;
  std::uint64_t seed = 0;
};

/// Cross-entropy training on labelled images; returns final training accuracy.
double train_classifier(ConvFeatureNet& net, const torch::Tensor& images, const torch::Tensor& labels,
                        const ClassifierTrainConfig& cfg);

/// Argmax class predictions, [N] int64.
torch::Tensor classify(ConvFeatureNet& net, const torch::Tensor& images, int64_t batch = 256);

/// FeatureExtractor over a frozen ConvFeatureNet.
class ConvFeatureExtractor : public FeatureExtractor {
 public:
  ConvFeatureExtractor(ConvFeatureNet net, std::string name);

  torch::Tensor features(const torch::Tensor& images) const override;
  std::vector<torch::Tensor> activations(const torch::Tensor& images) const override;
  int64_t dim() const override;
  std::string descriptor() const override;

  ConvFeatureNet net() const { return net_; }

 private:
  mutable ConvFeatureNet net_;
  std::string descriptor_;
};

}  // namespace ldm
