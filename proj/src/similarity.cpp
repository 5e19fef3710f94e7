#include "ldm/similarity.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "ldm/errors.hpp"

namespace ldm {

namespace F = torch::nn::functional;

namespace {

struct SsimTerms {
  torch::Tensor luminance;  // [N, C, H', W']
  torch::Tensor cs;         // contrast * structure
};

torch::Tensor gaussian_window(const SsimParams& p, const torch::TensorOptions& opts) {
  std::vector<double> g(static_cast<std::size_t>(p.window));
  const double centre = (p.window - 1) / 2.0;
  double total = 0.0;
  for (int i = 0; i < p.window; ++i) {
    const double d = i - centre;
    g[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * p.sigma * p.sigma));
    total += g[static_cast<std::size_t>(i)];
  }
  for (auto& v : g) {
    v /= total;
  }
  return torch::tensor(g, torch::kDouble).to(opts);
}

// Valid-mode separable Gaussian filter applied per channel.
torch::Tensor blur(const torch::Tensor& x, const torch::Tensor& g) {
  const auto c = x.size(1);
  const auto k = g.size(0);
  auto kh = g.view({1, 1, k, 1}).expand({c, 1, k, 1}).contiguous();
  auto kw = g.view({1, 1, 1, k}).expand({c, 1, 1, k}).contiguous();
  auto y = F::conv2d(x, kh, F::Conv2dFuncOptions().groups(c));
  return F::conv2d(y, kw, F::Conv2dFuncOptions().groups(c));
}

void check_pair(const torch::Tensor& a, const torch::Tensor& b, const SsimParams& p) {
  if (a.dim() != 4 || !a.sizes().equals(b.sizes())) {
    throw ContractError("SSIM expects two image batches of identical [N, C, H, W] shape");
  }
  if (p.window < 1 || p.sigma <= 0.0) {
    throw ConfigError("SSIM window must be >= 1 and sigma > 0");
  }
  if (a.size(2) < p.window || a.size(3) < p.window) {
    throw ContractError("image " + std::to_string(a.size(2)) + "x" + std::to_string(a.size(3)) +
                        " is smaller than the SSIM window " + std::to_string(p.window));
  }
}

SsimTerms ssim_terms(const torch::Tensor& a01, const torch::Tensor& b01, const SsimParams& p) {
  const double c1 = (p.k1 * 1.0) * (p.k1 * 1.0);
  const double c2 = (p.k2 * 1.0) * (p.k2 * 1.0);
  auto g = gaussian_window(p, a01.options());
  auto mu_a = blur(a01, g);
  auto mu_b = blur(b01, g);
  auto var_a = blur(a01 * a01, g) - mu_a * mu_a;
  auto var_b = blur(b01 * b01, g) - mu_b * mu_b;
  auto cov = blur(a01 * b01, g) - mu_a * mu_b;
  auto lum = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1);
  auto cs = (2.0 * cov + c2) / (var_a + var_b + c2);
  return {lum, cs};
}

torch::Tensor to_unit(const torch::Tensor& x) { return (x + 1.0) * 0.5; }

torch::Tensor image_mean(const torch::Tensor& map) { return map.flatten(1).mean(1); }

}  // namespace

torch::Tensor ssim_per_image(const torch::Tensor& a, const torch::Tensor& b, const SsimParams& params) {
  check_pair(a, b, params);
  auto terms = ssim_terms(to_unit(a), to_unit(b), params);
  return image_mean(terms.luminance * terms.cs);
}

torch::Tensor ssim(const torch::Tensor& a, const torch::Tensor& b, const SsimParams& params) {
  return ssim_per_image(a, b, params).mean();
}

const std::vector<double>& default_ms_ssim_weights() {
  static const std::vector<double> weights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  return weights;
}

std::vector<double> ms_ssim_weights(int scales) {
  const auto& all = default_ms_ssim_weights();
  if (scales < 1 || scales > static_cast<int>(all.size())) {
    throw ConfigError("MS-SSIM supports 1..5 scales");
  }
  std::vector<double> w(all.begin(), all.begin() + scales);
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& v : w) {
    v /= total;
  }
  return w;
}

int max_ms_ssim_scales(int64_t height, int64_t width, int window) {
  const int64_t side = std::min(height, width);
  int scales = 0;
  while (scales < 5 && side >= static_cast<int64_t>(window) << scales) {
    ++scales;
  }
  if (scales == 0) {
    throw ContractError("image too small for a single SSIM window");
  }
  return scales;
}

torch::Tensor ms_ssim_per_image(const torch::Tensor& a, const torch::Tensor& b, const std::vector<double>& weights,
                                const SsimParams& params) {
  if (weights.empty()) {
    throw ConfigError("MS-SSIM needs at least one scale weight");
  }
  const auto scales = static_cast<int64_t>(weights.size());
  const int64_t needed = static_cast<int64_t>(params.window) << (scales - 1);
  if (a.dim() == 4 && (a.size(2) < needed || a.size(3) < needed)) {
    throw ContractError("MS-SSIM with " + std::to_string(scales) + " scales needs images of at least " +
                        std::to_string(needed) + " px per side");
  }
  check_pair(a, b, params);

  auto x = to_unit(a);
  auto y = to_unit(b);
  torch::Tensor result;
  for (int64_t j = 0; j < scales; ++j) {
    auto terms = ssim_terms(x, y, params);
    torch::Tensor value = j + 1 == scales ? image_mean(terms.luminance * terms.cs) : image_mean(terms.cs);
    auto factor = torch::relu(value).pow(weights[static_cast<std::size_t>(j)]);
    result = result.defined() ? result * factor : factor;
    if (j + 1 < scales) {
      x = F::avg_pool2d(x, F::AvgPool2dFuncOptions(2));
      y = F::avg_pool2d(y, F::AvgPool2dFuncOptions(2));
    }
  }
  return result;
}

torch::Tensor ms_ssim(const torch::Tensor& a, const torch::Tensor& b, const std::vector<double>& weights,
                      const SsimParams& params) {
  return ms_ssim_per_image(a, b, weights, params).mean();
}

}  // namespace ldm
