#pragma once

#include <Eigen/Dense>
#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>

#include "ldm/feature_extractor.hpp"
#include "ldm/similarity.hpp"

namespace ldm {

using FeatureMatrix = Eigen::MatrixXd;  // N x D, one row per item

struct GaussianStats {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
  int64_t count = 0;
};

/// Exact mean and unbiased (N - 1) covariance, symmetrized.
GaussianStats fit_gaussian(const FeatureMatrix& features);

/// Principal square root of a symmetric positive semidefinite matrix.
/// Eigenvalues in [-1e-8 * ||Σ||_2, 0) are clamped to zero; anything more
/// negative, or asymmetry beyond 1e-8 relative, raises NumericError.
Eigen::MatrixXd matrix_sqrt(const Eigen::MatrixXd& sigma);

/// ||mu1 - mu2||^2 + Tr(Σ1 + Σ2 - 2 (Σ1 Σ2)^{1/2}), clamped at zero.
double frechet_distance(const GaussianStats& g1, const GaussianStats& g2);

double fid(const FeatureMatrix& real, const FeatureMatrix& gen);
double fid(const torch::Tensor& real_images, const torch::Tensor& gen_images, const FeatureExtractor& f);

/// Runs the extractor in evaluation batches without autograd.
FeatureMatrix extract_features(const FeatureExtractor& f, const torch::Tensor& images, int64_t batch = 256);
FeatureMatrix to_matrix(const torch::Tensor& features);

/// Distance from each point to its k-th nearest neighbour, excluding itself.
Eigen::VectorXd knn_radii(const FeatureMatrix& points, int k);

struct PRConfig {
  int k = 3;
};

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
};

/// precision: share of generated points inside at least one real k-NN ball;
/// recall: share of real points inside at least one generated k-NN ball.
PrecisionRecall improved_precision_recall(const FeatureMatrix& real, const FeatureMatrix& gen, const PRConfig& cfg = {});

/// Plain mean squared error over all elements. Callers wanting [0, 1]
/// units rescale first (see to_unit_range).
double mse(const torch::Tensor& a, const torch::Tensor& b);
torch::Tensor mse_per_image(const torch::Tensor& a, const torch::Tensor& b);
torch::Tensor to_unit_range(const torch::Tensor& images);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};
/// Population standard deviation.
MeanStd mean_std(const torch::Tensor& values);

struct MetricReport {
  double fid = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::optional<MeanStd> ms_ssim;
  std::optional<MeanStd> mse_1e5;  // MSE on [0, 1] images in 1e-5 units
  std::string reference;           // reference-batch descriptor hash
  std::string extractor;           // feature extractor descriptor
  std::uint64_t seed = 0;
  std::string started_at;
  std::string finished_at;

  void validate() const;
  std::string to_json() const;
  static std::string csv_header();
  /// Timestamps are excluded so reruns produce identical rows.
  std::string csv_row() const;
};

/// Binary feature cache: "LDMFEAT1" magic, uint64 D, uint64 N, uint32 dtype
/// (1 = float64), then N*D little-endian row-major values.
void write_feature_cache(const std::filesystem::path& path, const FeatureMatrix& features);
FeatureMatrix read_feature_cache(const std::filesystem::path& path);

}  // namespace ldm
