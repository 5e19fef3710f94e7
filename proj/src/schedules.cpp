#include "ldm/schedules.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <string>

#include "ldm/errors.hpp"

namespace ldm {

namespace {

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.sizes().equals(b.sizes())) {
    throw ContractError(std::string(what) + ": shape mismatch between latent and noise");
  }
}

void check_step(const NoiseSchedule& s, int t, int lowest) {
  if (t < lowest || t > s.steps()) {
    throw IndexError("step index " + std::to_string(t) + " outside [" + std::to_string(lowest) + ", " +
                     std::to_string(s.steps()) + "]");
  }
}

// Broadcast a per-item [N] coefficient over the trailing dimensions of x.
torch::Tensor per_item(const torch::Tensor& coef, const torch::Tensor& x) {
  std::vector<int64_t> shape(static_cast<std::size_t>(x.dim()), 1);
  shape[0] = x.size(0);
  return coef.to(x.scalar_type()).view(shape);
}

}  // namespace

NoiseSchedule::NoiseSchedule(std::vector<double> betas, double beta_start, double beta_end)
    : betas_(std::move(betas)), beta_start_(beta_start), beta_end_(beta_end) {
  if (betas_.empty()) {
    throw ConfigError("noise schedule needs at least one step");
  }
  alpha_bar_.reserve(betas_.size() + 1);
  alpha_bar_.push_back(1.0);
  for (double b : betas_) {
    if (!(b > 0.0 && b < 1.0)) {
      throw ConfigError("beta values must lie in (0, 1)");
    }
    alpha_bar_.push_back(alpha_bar_.back() * (1.0 - b));
  }
}

double NoiseSchedule::beta(int t) const {
  check_step(*this, t, 1);
  return betas_[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha(int t) const { return 1.0 - beta(t); }

double NoiseSchedule::alpha_bar(int t) const {
  check_step(*this, t, 0);
  return alpha_bar_[static_cast<std::size_t>(t)];
}

torch::Tensor NoiseSchedule::alpha_bar(const torch::Tensor& t) const {
  if (t.dim() != 1 || t.scalar_type() != torch::kLong) {
    throw ContractError("per-item step tensor must be int64 with shape [N]");
  }
  auto contiguous = t.contiguous();
  auto out = torch::empty({t.size(0)}, torch::kDouble);
  auto* dst = out.data_ptr<double>();
  const auto* src = contiguous.data_ptr<int64_t>();
  for (int64_t i = 0; i < t.size(0); ++i) {
    dst[i] = alpha_bar(static_cast<int>(src[i]));
  }
  return out;
}

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) {
    throw ConfigError("schedule step count must be >= 1");
  }
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("linear schedule requires 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * frac;
  }
  return NoiseSchedule(std::move(betas), beta_start, beta_end);
}

torch::Tensor forward_diffuse(const torch::Tensor& x0, int t, const torch::Tensor& eps, const NoiseSchedule& s) {
  check_step(s, t, 0);
  check_same_shape(x0, eps, "forward_diffuse");
  const double ab = s.alpha_bar(t);
  if (t == 0) {
    return x0.clone();
  }
  return x0 * std::sqrt(ab) + eps * std::sqrt(1.0 - ab);
}

torch::Tensor forward_diffuse(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps,
                              const NoiseSchedule& s) {
  check_same_shape(x0, eps, "forward_diffuse");
  if (t.dim() != 1 || t.size(0) != x0.size(0)) {
    throw ContractError("forward_diffuse: need one step index per batch item");
  }
  const auto ab = s.alpha_bar(t);
  return per_item(ab.sqrt(), x0) * x0 + per_item((1.0 - ab).sqrt(), x0) * eps;
}

torch::Tensor predict_x0_from_eps(const torch::Tensor& x_t, int t, const torch::Tensor& eps_hat,
                                  const NoiseSchedule& s) {
  if (t == 0) {
    throw IndexError("predict_x0_from_eps is undefined at t = 0");
  }
  check_step(s, t, 1);
  check_same_shape(x_t, eps_hat, "predict_x0_from_eps");
  const double ab = s.alpha_bar(t);
  return (x_t - eps_hat * std::sqrt(1.0 - ab)) / std::sqrt(ab);
}

torch::Tensor make_noise(const torch::Tensor& like, torch::Generator& gen) {
  return torch::randn(like.sizes(), gen, like.options());
}

torch::Generator make_generator(std::uint64_t seed) {
  return at::make_generator<at::CPUGeneratorImpl>(seed);
}

}  // namespace ldm
