#pragma once

#include <torch/torch.h>

#include <string>
#include <vector>

namespace ldm {

/// Deterministic map from an image batch [N, C, H, W] in [-1, 1] to features.
///
/// `features` gives the pooled N x D matrix used by FID and precision/recall;
/// `activations` exposes intermediate spatial maps for the perceptual distance.
/// Both are differentiable with respect to the input.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;

  virtual torch::Tensor features(const torch::Tensor& images) const = 0;
  virtual std::vector<torch::Tensor> activations(const torch::Tensor& images) const = 0;
  virtual int64_t dim() const = 0;
  /// Name plus weights hash; recorded in every metric report.
  virtual std::string descriptor() const = 0;
};

/// Perceptual distance: per layer, unit-normalize channels at each location,
/// take the squared difference summed over channels and average spatially;
/// layers are averaged. Returns one value per image, shape [N].
torch::Tensor perceptual_distance(const FeatureExtractor& f, const torch::Tensor& a, const torch::Tensor& b);

}  // namespace ldm
