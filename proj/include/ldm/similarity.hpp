#pragma once

// Windowed structural similarity. Images are batches [N, C, H, W] in [-1, 1];
// both functions rescale to [0, 1] internally and use a unit data range.

#include <torch/torch.h>

#include <vector>

namespace ldm {

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

/// Mean SSIM per image, shape [N]. Differentiable.
torch::Tensor ssim_per_image(const torch::Tensor& a, const torch::Tensor& b, const SsimParams& params = {});

/// Batch-mean SSIM (scalar tensor).
torch::Tensor ssim(const torch::Tensor& a, const torch::Tensor& b, const SsimParams& params = {});

/// Standard five-scale weights (0.0448, 0.2856, 0.3001, 0.2363, 0.1333).
const std::vector<double>& default_ms_ssim_weights();

/// First `scales` default weights renormalized to sum to one.
std::vector<double> ms_ssim_weights(int scales);

/// Largest scale count (<= 5) whose coarsest level still fits the window.
int max_ms_ssim_scales(int64_t height, int64_t width, int window = 11);

/// MS-SSIM per image, shape [N]: contrast-structure terms at every scale and
/// the luminance term only at the coarsest one, each raised to its weight.
/// Negative per-scale terms are clamped to zero before exponentiation.
torch::Tensor ms_ssim_per_image(const torch::Tensor& a, const torch::Tensor& b, const std::vector<double>& weights,
                                const SsimParams& params = {});

torch::Tensor ms_ssim(const torch::Tensor& a, const torch::Tensor& b, const std::vector<double>& weights,
                      const SsimParams& params = {});

}  // namespace ldm
