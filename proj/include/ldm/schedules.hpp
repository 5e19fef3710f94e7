#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <vector>

namespace ldm {

/// Forward-process noise schedule over steps t = 1..T.
///
/// Tables are stored in double precision. Index 0 of alpha_bar is the clean
/// state (alpha_bar[0] = 1); beta/alpha are only defined for t >= 1.
class NoiseSchedule {
 public:
  NoiseSchedule(std::vector<double> betas, double beta_start, double beta_end);

  int steps() const noexcept { return static_cast<int>(betas_.size()); }
  double beta_start() const noexcept { return beta_start_; }
  double beta_end() const noexcept { return beta_end_; }

  double beta(int t) const;
  double alpha(int t) const;
  /// ᾱ_t for t in [0, T].
  double alpha_bar(int t) const;

  /// ᾱ gathered for a batch of per-item step indices (int64 tensor, shape [N]).
  torch::Tensor alpha_bar(const torch::Tensor& t) const;

 private:
  std::vector<double> betas_;
  std::vector<double> alpha_bar_;
  double beta_start_;
  double beta_end_;
};

/// Linearly spaced betas, inclusive of both endpoints.
NoiseSchedule make_linear_schedule(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);

/// Serializable parameters of a linear schedule.
struct ScheduleConfig {
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  NoiseSchedule build() const { return make_linear_schedule(steps, beta_start, beta_end); }
};

/// x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps. Accepts 0 <= t <= T.
torch::Tensor forward_diffuse(const torch::Tensor& x0, int t, const torch::Tensor& eps, const NoiseSchedule& s);

/// Per-item variant used by training: `t` is an int64 tensor of shape [N].
torch::Tensor forward_diffuse(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps,
                              const NoiseSchedule& s);

/// Inverse of the forward closed form. Requires 1 <= t <= T.
torch::Tensor predict_x0_from_eps(const torch::Tensor& x_t, int t, const torch::Tensor& eps_hat,
                                  const NoiseSchedule& s);

/// Seeded standard-normal draw shaped like `like`.
torch::Tensor make_noise(const torch::Tensor& like, torch::Generator& gen);

/// Fresh CPU generator with the given seed.
torch::Generator make_generator(std::uint64_t seed);

}  // namespace ldm
