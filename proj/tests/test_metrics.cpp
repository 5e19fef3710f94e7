#include "testing.hpp"

#include <cmath>
#include <filesystem>
#include <json.hpp>
#include <numeric>

#include "ldm/errors.hpp"
#include "ldm/metrics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace ldm;

namespace {

GaussianStats stats(Eigen::VectorXd mu, Eigen::MatrixXd sigma) {
  GaussianStats g;
  g.mu = std::move(mu);
  g.sigma = std::move(sigma);
  g.count = 2;
  return g;
}

Eigen::MatrixXd random_spd(testutil::Gen& g, int d) {
  const Eigen::MatrixXd a = g.matrix(d, d);
  return a.transpose() * a + 1e-3 * Eigen::MatrixXd::Identity(d, d);
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("fit_gaussian hand cases") {
    Eigen::MatrixXd two(2, 2);
    two << 0, 0, 2, 0;
    auto g = fit_gaussian(two);
    CHECK(g.mu(0) == 1.0);
    CHECK(g.mu(1) == 0.0);
    CHECK(g.sigma(0, 0) == 2.0);
    CHECK(g.sigma(1, 1) == 0.0);
    CHECK(g.sigma(0, 1) == 0.0);
    Eigen::MatrixXd same = Eigen::MatrixXd::Constant(5, 3, 1.5);
    CHECK(fit_gaussian(same).sigma.isZero(0.0));
    CHECK_THROWS_AS(fit_gaussian(Eigen::MatrixXd::Zero(1, 3)), ContractError);
  }

  TEST_CASE("fit_gaussian matches a two-pass scalar oracle") {
    testutil::Gen g(21);
    const Eigen::MatrixXd x = g.matrix(37, 6) * 3.0;
    auto s = fit_gaussian(x);
    for (int i = 0; i < 6; ++i) {
      double m = 0;
      for (int r = 0; r < 37; ++r) m += x(r, i);
      m /= 37;
      CHECK(std::abs(s.mu(i) - m) <= 1e-9);
    }
    for (int i = 0; i < 6; ++i) {
      for (int j = 0; j < 6; ++j) {
        double c = 0;
        for (int r = 0; r < 37; ++r) c += (x(r, i) - s.mu(i)) * (x(r, j) - s.mu(j));
        c /= 36;
        CHECK(std::abs(s.sigma(i, j) - c) <= 1e-9);
        CHECK(s.sigma(i, j) == s.sigma(j, i));
      }
    }
  }

  TEST_CASE("matrix_sqrt hand cases") {
    auto id = Eigen::MatrixXd::Identity(4, 4);
    CHECK((matrix_sqrt(id) - id).norm() <= 1e-12);
    Eigen::MatrixXd d = Eigen::Vector2d(4, 9).asDiagonal();
    Eigen::MatrixXd r = matrix_sqrt(d);
    CHECK(r(0, 0) == doctest::Approx(2.0));
    CHECK(r(1, 1) == doctest::Approx(3.0));
    CHECK(std::abs(r(0, 1)) <= 1e-12);
  }

  TEST_CASE("matrix_sqrt residual on 100 random SPD matrices") {
    testutil::Gen g(22);
    for (int trial = 0; trial < 100; ++trial) {
      const int dim = trial < 10 ? 64 + 192 * (trial % 2) : g.integer(1, 256);
      Eigen::MatrixXd s = random_spd(g, dim);
      Eigen::MatrixXd r = matrix_sqrt(s);
      CAPTURE(dim);
      CHECK((r * r - s).norm() <= 1e-6 * s.norm());
    }
  }

  TEST_CASE("matrix_sqrt on rank-deficient and invalid input") {
    testutil::Gen g(23);
    const Eigen::MatrixXd a = g.matrix(3, 10);
    const Eigen::MatrixXd low = a.transpose() * a;  // rank 3 of 10
    Eigen::MatrixXd r = matrix_sqrt(low);
    CHECK((r * r - low).norm() <= 1e-6 * low.norm());
    Eigen::MatrixXd asym = Eigen::MatrixXd::Identity(3, 3);
    asym(0, 1) = 0.5;
    CHECK_THROWS_AS(matrix_sqrt(asym), NumericError);
    Eigen::MatrixXd indefinite = Eigen::Vector2d(1.0, -1.0).asDiagonal();
    CHECK_THROWS_AS(matrix_sqrt(indefinite), NumericError);
    Eigen::MatrixXd nearly = Eigen::Vector2d(1.0, -1e-12).asDiagonal();
    CHECK(matrix_sqrt(nearly)(1, 1) == 0.0);
  }

  TEST_CASE("frechet_distance analytic cases") {
    testutil::Gen g(24);
    for (int trial = 0; trial < 5; ++trial) {
      const int dim = g.integer(1, 16);
      auto s = random_spd(g, dim);
      Eigen::VectorXd mu = g.matrix(dim, 1);
      CHECK(std::abs(frechet_distance(stats(mu, s), stats(mu, s))) <= 1e-6);
      Eigen::VectorXd off = g.matrix(dim, 1);
      auto id = Eigen::MatrixXd::Identity(dim, dim);
      const double expect = (mu - off).squaredNorm();
      CHECK(std::abs(frechet_distance(stats(mu, id), stats(off, id)) - expect) <= 1e-6);
    }
    Eigen::VectorXd zero = Eigen::VectorXd::Zero(1);
    Eigen::MatrixXd v1(1, 1), v4(1, 1);
    v1 << 1.0;
    v4 << 4.0;
    CHECK(std::abs(frechet_distance(stats(zero, v1), stats(zero, v4)) - 1.0) <= 1e-6);
    CHECK_THROWS_AS(frechet_distance(stats(zero, v1), stats(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2))),
                    ContractError);
  }

  TEST_CASE("frechet_distance with diagonal covariances has a closed form") {
    testutil::Gen g(25);
    for (int trial = 0; trial < 20; ++trial) {
      const int dim = g.integer(1, 32);
      Eigen::VectorXd a(dim), b(dim), m1(dim), m2(dim);
      double expect = 0.0;
      for (int i = 0; i < dim; ++i) {
        a(i) = g.uniform(0.0, 5.0);
        b(i) = g.uniform(0.0, 5.0);
        m1(i) = g.normal();
        m2(i) = g.normal();
        expect += (m1(i) - m2(i)) * (m1(i) - m2(i)) + std::pow(std::sqrt(a(i)) - std::sqrt(b(i)), 2);
      }
      const Eigen::MatrixXd sa = a.asDiagonal(), sb = b.asDiagonal();
      CHECK(frechet_distance(stats(m1, sa), stats(m2, sb)) == doctest::Approx(expect).epsilon(1e-9));
    }
  }

  TEST_CASE("frechet_distance symmetry and fid order invariance") {
    testutil::Gen g(26);
    for (int trial = 0; trial < 10; ++trial) {
      const int dim = g.integer(2, 24);
      const Eigen::MatrixXd x = g.matrix(60, dim);
      const Eigen::MatrixXd y = g.matrix(50, dim) * 1.5 + Eigen::MatrixXd::Constant(50, dim, 0.3);
      const double f1 = fid(x, y), f2 = fid(y, x);
      CHECK(std::abs(f1 - f2) <= 1e-9 * std::max(1.0, f1));
      CHECK(f1 >= 0.0);
      Eigen::PermutationMatrix<Eigen::Dynamic> p(60);
      p.setIdentity();
      std::shuffle(p.indices().data(), p.indices().data() + 60, g.rng);
      const Eigen::MatrixXd xp = p * x;
      CHECK(fid(xp, y) == doctest::Approx(f1).epsilon(1e-9));
      CHECK(fid(x, x) <= 1e-6);
    }
  }

  TEST_CASE("knn_radii hand cases and brute-force agreement") {
    Eigen::MatrixXd line(3, 1);
    line << 0, 1, 3;
    auto r = knn_radii(line, 1);
    CHECK(r(0) == 1.0);
    CHECK(r(1) == 1.0);
    CHECK(r(2) == 2.0);
    Eigen::MatrixXd dup(2, 2);
    dup << 1, 2, 1, 2;
    auto rd = knn_radii(dup, 1);
    CHECK(rd(0) == 0.0);
    CHECK(rd(1) == 0.0);
    CHECK_THROWS_AS(knn_radii(line, 3), ContractError);
    CHECK_THROWS_AS(knn_radii(line, 0), ContractError);
    testutil::Gen g(27);
    for (int trial = 0; trial < 50; ++trial) {
      const int n = g.integer(2, 60), d = g.integer(1, 5);
      const int k = g.integer(1, n - 1);
      const Eigen::MatrixXd p = trial % 2 ? g.lattice(n, d, 3) : g.matrix(n, d);
      auto lib = knn_radii(p, k);
      auto ref = oracle::knn_radii(p, k);
      for (int i = 0; i < n; ++i) REQUIRE(lib(i) == ref[static_cast<std::size_t>(i)]);
    }
  }

  TEST_CASE("precision/recall hand cases") {
    Eigen::MatrixXd real(3, 2), gen(2, 2);
    real << 0, 0, 1, 0, 0, 1;
    gen << 0.1, 0, 5, 5;
    auto pr = improved_precision_recall(real, gen, PRConfig{1});
    CHECK(pr.precision == 0.5);
    CHECK(pr.recall == 1.0);
    testutil::Gen g(28);
    const Eigen::MatrixXd x = g.matrix(40, 4);
    auto same = improved_precision_recall(x, x, PRConfig{1});
    CHECK(same.precision == 1.0);
    CHECK(same.recall == 1.0);
    const Eigen::MatrixXd far = x.array() + 1e6;
    auto apart = improved_precision_recall(x, far, PRConfig{1});
    CHECK(apart.precision == 0.0);
    CHECK(apart.recall == 0.0);
    CHECK_THROWS_AS(improved_precision_recall(x, x.topRows(3), PRConfig{3}), ContractError);
    CHECK_THROWS_AS(improved_precision_recall(x, g.matrix(10, 3)), ContractError);
  }

  TEST_CASE("precision/recall equal the brute-force oracle on 200 random instances") {
    testutil::Gen g(29);
    for (int trial = 0; trial < 200; ++trial) {
      const int n = g.integer(2, 200), m = g.integer(2, 200), d = g.integer(1, 8);
      const int k = g.integer(1, std::min(n, m) - 1);
      Eigen::MatrixXd real, gen;
      if (trial % 3 == 0) {
        real = g.lattice(n, d, 4);
        gen = g.lattice(m, d, 4);
      } else {
        real = g.matrix(n, d);
        gen = g.matrix(m, d) * g.uniform(0.5, 2.0) + Eigen::MatrixXd::Constant(m, d, g.uniform(-1, 1));
      }
      auto pr = improved_precision_recall(real, gen, PRConfig{k});
      const double p = oracle::coverage(real, oracle::knn_radii(real, k), gen);
      const double r = oracle::coverage(gen, oracle::knn_radii(gen, k), real);
      CAPTURE(trial);
      REQUIRE(pr.precision == p);
      REQUIRE(pr.recall == r);
      REQUIRE(pr.precision >= 0.0);
      REQUIRE(pr.precision <= 1.0);
      REQUIRE(pr.recall >= 0.0);
      REQUIRE(pr.recall <= 1.0);
    }
  }

  TEST_CASE("mse") {
    testutil::Gen g(30);
    auto a = g.tensor({2, 1, 5, 5}, torch::kDouble);
    CHECK(mse(a, a) == 0.0);
    CHECK(mse(a, a + 0.1) == doctest::Approx(0.01).epsilon(1e-9));
    auto b = g.tensor({2, 1, 5, 5}, torch::kDouble);
    double s = 0;
    auto av = a.flatten(), bv = b.flatten();
    for (int64_t i = 0; i < av.numel(); ++i) s += std::pow(av[i].item<double>() - bv[i].item<double>(), 2);
    CHECK(std::abs(mse(a, b) - s / 50.0) <= 1e-9);
    auto per = mse_per_image(a, b);
    CHECK(per.size(0) == 2);
    CHECK(per.mean().item<double>() == doctest::Approx(s / 50.0));
    CHECK_THROWS_AS(mse(a, b.narrow(3, 0, 4)), ContractError);
    auto u = to_unit_range(torch::tensor({-1.0, 0.0, 1.0}));
    CHECK(u[0].item<double>() == 0.0);
    CHECK(u[1].item<double>() == 0.5);
    CHECK(u[2].item<double>() == 1.0);
  }

  TEST_CASE("mean_std uses the population deviation") {
    auto ms = mean_std(torch::tensor({1.0, 3.0}));
    CHECK(ms.mean == 2.0);
    CHECK(ms.std == 1.0);
  }

  TEST_CASE("metric report serialization") {
    MetricReport r;
    r.fid = 1.25;
    r.precision = 0.5;
    r.recall = 0.75;
    r.reference = "abc";
    r.extractor = "toy:d64:ff";
    r.seed = 7;
    r.started_at = "2026-01-01T00:00:00Z";
    r.finished_at = "2026-01-01T00:00:01Z";
    auto j = nlohmann::json::parse(r.to_json());
    CHECK(j["fid"] == 1.25);
    CHECK(j["seed"] == 7);
    CHECK(j["extractor"] == "toy:d64:ff");
    CHECK_FALSE(j.contains("ms_ssim"));
    MetricReport later = r;
    later.started_at = "2030-01-01T00:00:00Z";
    later.finished_at = "2030-01-01T00:00:05Z";
    CHECK(later.csv_row() == r.csv_row());
    const auto header = MetricReport::csv_header();
    auto header_cols = std::count(header.begin(), header.end(), ',');
    auto row = r.csv_row();
    CHECK(std::count(row.begin(), row.end(), ',') == header_cols);
    r.ms_ssim = MeanStd{0.9, 0.01};
    r.mse_1e5 = MeanStd{25, 9};
    j = nlohmann::json::parse(r.to_json());
    CHECK(j["ms_ssim"] == 0.9);
    CHECK(j["mse_1e-5"] == 25);
    r.precision = 1.5;
    CHECK_THROWS_AS(r.validate(), NumericError);
  }

  TEST_CASE("feature cache round trip") {
    testutil::Gen g(31);
    const Eigen::MatrixXd f = g.matrix(13, 5);
    auto path = std::filesystem::temp_directory_path() / "ldm_test_features.bin";
    write_feature_cache(path, f);
    CHECK(std::filesystem::file_size(path) == 8 + 8 + 8 + 4 + 13 * 5 * 8);
    auto back = read_feature_cache(path);
    CHECK(back == f);
    std::filesystem::remove(path);
    CHECK_THROWS_AS(read_feature_cache(path), IoError);
  }
}
