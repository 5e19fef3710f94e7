#include "ldm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <sstream>

#include "ldm/errors.hpp"

namespace ldm {

GaussianStats fit_gaussian(const FeatureMatrix& features) {
  const auto n = features.rows();
  if (n < 2) {
    throw ContractError("fit_gaussian needs at least two samples");
  }
  GaussianStats g;
  g.count = n;
  g.mu = features.colwise().mean().transpose();
  const Eigen::MatrixXd centred = features.rowwise() - g.mu.transpose();
  Eigen::MatrixXd cov = (centred.transpose() * centred) / static_cast<double>(n - 1);
  g.sigma = 0.5 * (cov + cov.transpose());
  return g;
}

Eigen::MatrixXd matrix_sqrt(const Eigen::MatrixXd& sigma) {
  if (sigma.rows() != sigma.cols()) {
    throw ContractError("matrix_sqrt needs a square matrix");
  }
  if (sigma.size() == 0) {
    return sigma;
  }
  if (!sigma.allFinite()) {
    throw NumericError("matrix_sqrt: non-finite entries");
  }
  const double norm_f = sigma.norm();
  const double asym = (sigma - sigma.transpose()).norm();
  if (asym > 1e-8 * std::max(norm_f, 1e-300)) {
    throw NumericError("matrix_sqrt: input is not symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (sigma + sigma.transpose()));
  if (eig.info() != Eigen::Success) {
    throw NumericError("matrix_sqrt: eigendecomposition failed");
  }
  Eigen::VectorXd lambda = eig.eigenvalues();
  const double spectral = lambda.cwiseAbs().maxCoeff();
  for (Eigen::Index i = 0; i < lambda.size(); ++i) {
    if (lambda(i) < -1e-8 * spectral) {
      throw NumericError("matrix_sqrt: matrix is indefinite (eigenvalue " + std::to_string(lambda(i)) + ")");
    }
    lambda(i) = std::sqrt(std::max(lambda(i), 0.0));
  }
  const auto& v = eig.eigenvectors();
  return v * lambda.asDiagonal() * v.transpose();
}

double frechet_distance(const GaussianStats& g1, const GaussianStats& g2) {
  if (g1.mu.size() != g2.mu.size() || g1.sigma.rows() != g2.sigma.rows()) {
    throw ContractError("frechet_distance: feature dimensions differ");
  }
  const double mean_term = (g1.mu - g2.mu).squaredNorm();
  // Tr((Σ1 Σ2)^{1/2}) equals Tr((S1 Σ2 S1)^{1/2}) with S1 = Σ1^{1/2}; the
  // latter is symmetric PSD, so its eigenvalues are real and non-negative.
  const Eigen::MatrixXd s1 = matrix_sqrt(g1.sigma);
  Eigen::MatrixXd inner = s1 * g2.sigma * s1;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(inner, Eigen::EigenvaluesOnly);
  double trace_sqrt = 0.0;
  for (Eigen::Index i = 0; i < eig.eigenvalues().size(); ++i) {
    trace_sqrt += std::sqrt(std::max(eig.eigenvalues()(i), 0.0));
  }
  const double d = mean_term + g1.sigma.trace() + g2.sigma.trace() - 2.0 * trace_sqrt;
  return std::max(d, 0.0);
}

double fid(const FeatureMatrix& real, const FeatureMatrix& gen) {
  return frechet_distance(fit_gaussian(real), fit_gaussian(gen));
}

FeatureMatrix to_matrix(const torch::Tensor& features) {
  if (features.dim() != 2) {
    throw ContractError("feature tensor must be N x D");
  }
  auto f = features.detach().to(torch::kDouble).contiguous();
  FeatureMatrix out(f.size(0), f.size(1));
  const auto* src = f.data_ptr<double>();
  for (int64_t i = 0; i < f.size(0); ++i) {
    for (int64_t j = 0; j < f.size(1); ++j) {
      out(i, j) = src[i * f.size(1) + j];
    }
  }
  return out;
}

FeatureMatrix extract_features(const FeatureExtractor& f, const torch::Tensor& images, int64_t batch) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> parts;
  for (int64_t start = 0; start < images.size(0); start += batch) {
    const int64_t len = std::min(batch, images.size(0) - start);
    parts.push_back(f.features(images.narrow(0, start, len)));
  }
  if (parts.empty()) {
    return FeatureMatrix(0, f.dim());
  }
  return to_matrix(torch::cat(parts, 0));
}

double fid(const torch::Tensor& real_images, const torch::Tensor& gen_images, const FeatureExtractor& f) {
  return fid(extract_features(f, real_images), extract_features(f, gen_images));
}

namespace {

double distance(const FeatureMatrix& a, Eigen::Index i, const FeatureMatrix& b, Eigen::Index j) {
  double s = 0.0;
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    const double d = a(i, c) - b(j, c);
    s += d * d;
  }
  return std::sqrt(s);
}

// Share of `queries` rows falling inside at least one ball (centre row of
// `centres`, radius from `radii`).
double coverage(const FeatureMatrix& queries, const FeatureMatrix& centres, const Eigen::VectorXd& radii) {
  Eigen::Index hits = 0;
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    for (Eigen::Index c = 0; c < centres.rows(); ++c) {
      if (distance(queries, q, centres, c) <= radii(c)) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(queries.rows());
}

}  // namespace

Eigen::VectorXd knn_radii(const FeatureMatrix& points, int k) {
  const auto n = points.rows();
  if (k < 1 || k >= n) {
    throw ContractError("knn_radii needs 1 <= k < N (k = " + std::to_string(k) + ", N = " + std::to_string(n) + ")");
  }
  Eigen::VectorXd radii(n);
  std::vector<double> dists(static_cast<std::size_t>(n - 1));
  for (Eigen::Index i = 0; i < n; ++i) {
    std::size_t m = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) {
        dists[m++] = distance(points, i, points, j);
      }
    }
    auto nth = dists.begin() + (k - 1);
    std::nth_element(dists.begin(), nth, dists.end());
    radii(i) = *nth;
  }
  return radii;
}

PrecisionRecall improved_precision_recall(const FeatureMatrix& real, const FeatureMatrix& gen, const PRConfig& cfg) {
  if (real.cols() != gen.cols()) {
    throw ContractError("precision/recall: feature dimensions differ");
  }
  if (cfg.k < 1 || cfg.k >= std::min(real.rows(), gen.rows())) {
    throw ContractError("precision/recall needs 1 <= k < min(N_real, N_gen)");
  }
  const auto real_radii = knn_radii(real, cfg.k);
  const auto gen_radii = knn_radii(gen, cfg.k);
  return {coverage(gen, real, real_radii), coverage(real, gen, gen_radii)};
}

double mse(const torch::Tensor& a, const torch::Tensor& b) {
  if (!a.sizes().equals(b.sizes())) {
    throw ContractError("mse: shape mismatch");
  }
  return (a.to(torch::kDouble) - b.to(torch::kDouble)).pow(2).mean().item<double>();
}

torch::Tensor mse_per_image(const torch::Tensor& a, const torch::Tensor& b) {
  if (!a.sizes().equals(b.sizes())) {
    throw ContractError("mse: shape mismatch");
  }
  return (a.to(torch::kDouble) - b.to(torch::kDouble)).pow(2).flatten(1).mean(1);
}

torch::Tensor to_unit_range(const torch::Tensor& images) { return (images + 1.0) * 0.5; }

MeanStd mean_std(const torch::Tensor& values) {
  auto v = values.to(torch::kDouble);
  if (v.numel() == 0) {
    return {};
  }
  return {v.mean().item<double>(), v.numel() > 1 ? v.std(/*unbiased=*/false).item<double>() : 0.0};
}

void MetricReport::validate() const {
  if (!(precision >= 0.0 && precision <= 1.0 && recall >= 0.0 && recall <= 1.0)) {
    throw NumericError("precision and recall must lie in [0, 1]");
  }
  if (!(fid >= 0.0)) {
    throw NumericError("FID must be non-negative");
  }
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["fid"] = fid;
  j["precision"] = precision;
  j["recall"] = recall;
  if (ms_ssim) {
    j["ms_ssim"] = ms_ssim->mean;
    j["ms_ssim_std"] = ms_ssim->std;
  }
  if (mse_1e5) {
    j["mse_1e-5"] = mse_1e5->mean;
    j["mse_1e-5_std"] = mse_1e5->std;
  }
  j["reference"] = reference;
  j["extractor"] = extractor;
  j["seed"] = seed;
  j["started_at"] = started_at;
  j["finished_at"] = finished_at;
  return j.dump(2) + "\n";
}

std::string MetricReport::csv_header() {
  return "fid,precision,recall,ms_ssim,ms_ssim_std,mse_1e-5,mse_1e-5_std,reference,extractor,seed";
}

std::string MetricReport::csv_row() const {
  std::ostringstream os;
  os << std::setprecision(10) << fid << ',' << precision << ',' << recall << ',';
  if (ms_ssim) {
    os << ms_ssim->mean << ',' << ms_ssim->std;
  } else {
    os << ',';
  }
  os << ',';
  if (mse_1e5) {
    os << mse_1e5->mean << ',' << mse_1e5->std;
  } else {
    os << ',';
  }
  os << ',' << reference << ',' << extractor << ',' << seed;
  return os.str();
}

namespace {
constexpr char kFeatureMagic[8] = {'L', 'D', 'M', 'F', 'E', 'A', 'T', '1'};
constexpr std::uint32_t kDtypeFloat64 = 1;
}  // namespace

void write_feature_cache(const std::filesystem::path& path, const FeatureMatrix& features) {
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw IoError("cannot write feature cache " + path.string());
  }
  const auto d = static_cast<std::uint64_t>(features.cols());
  const auto n = static_cast<std::uint64_t>(features.rows());
  os.write(kFeatureMagic, sizeof(kFeatureMagic));
  os.write(reinterpret_cast<const char*>(&d), sizeof(d));
  os.write(reinterpret_cast<const char*>(&n), sizeof(n));
  os.write(reinterpret_cast<const char*>(&kDtypeFloat64), sizeof(kDtypeFloat64));
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    for (Eigen::Index j = 0; j < features.cols(); ++j) {
      const double v = features(i, j);
      os.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
  }
  if (!os) {
    throw IoError("failed writing feature cache " + path.string());
  }
}

FeatureMatrix read_feature_cache(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw IoError("cannot open feature cache " + path.string());
  }
  char magic[8];
  std::uint64_t d = 0, n = 0;
  std::uint32_t dtype = 0;
  is.read(magic, sizeof(magic));
  is.read(reinterpret_cast<char*>(&d), sizeof(d));
  is.read(reinterpret_cast<char*>(&n), sizeof(n));
  is.read(reinterpret_cast<char*>(&dtype), sizeof(dtype));
  if (!is || !std::equal(magic, magic + 8, kFeatureMagic)) {
    throw IoError("not a feature cache: " + path.string());
  }
  if (dtype != kDtypeFloat64) {
    throw IoError("unsupported feature cache dtype " + std::to_string(dtype));
  }
  FeatureMatrix out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    for (Eigen::Index j = 0; j < out.cols(); ++j) {
      is.read(reinterpret_cast<char*>(&out(i, j)), sizeof(double));
    }
  }
  if (!is) {
    throw IoError("truncated feature cache " + path.string());
  }
  return out;
}

}  // namespace ldm
