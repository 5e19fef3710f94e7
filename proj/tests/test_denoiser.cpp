#include "testing.hpp"

#include <cmath>

#include "ldm/denoiser.hpp"
#include "ldm/errors.hpp"
#include "test_util.hpp"

using namespace ldm;

namespace {

UNetConfig tiny(int latent = 2, std::vector<int> widths = {8, 16}) {
  UNetConfig c;
  c.latent_channels = latent;
  c.widths = std::move(widths);
  c.blocks_per_level = 1;
  c.embed_dim = 16;
  return c;
}

}  // namespace

TEST_SUITE("denoiser") {
  TEST_CASE("sinusoidal embedding values") {
    auto e0 = sinusoidal_embedding(0, 8);
    REQUIRE(e0.size(0) == 8);
    for (int i = 0; i < 8; ++i) CHECK(e0[i].item<double>() == (i % 2 == 0 ? 0.0 : 1.0));
    auto e1 = sinusoidal_embedding(1, 128);
    auto e2 = sinusoidal_embedding(2, 128);
    CHECK((e1 - e2).abs().max().item<double>() >= 1e-3);
    // Pair i holds (sin, cos) of t * 10000^(-2i/d).
    const int d = 16;
    auto e = sinusoidal_embedding(37, d);
    for (int i = 0; i < d / 2; ++i) {
      const double f = std::pow(10000.0, -2.0 * i / d);
      CHECK(e[2 * i].item<double>() == doctest::Approx(std::sin(37 * f)).epsilon(1e-6));
      CHECK(e[2 * i + 1].item<double>() == doctest::Approx(std::cos(37 * f)).epsilon(1e-6));
    }
    auto batch = sinusoidal_embedding(torch::tensor({0, 37}, torch::kLong), d);
    CHECK(batch.sizes() == torch::IntArrayRef({2, d}));
    CHECK(testutil::bitwise_equal(batch[1], e));
    CHECK_THROWS_AS(sinusoidal_embedding(3, 7), ConfigError);
    CHECK_THROWS_AS(sinusoidal_embedding(-1, 8), IndexError);
  }

  TEST_CASE("config invariants") {
    auto c = tiny();
    c.embed_dim = 15;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny();
    c.widths = {12};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny(2, {8, 16, 32});
    CHECK_NOTHROW(c.check_latent(4, 8));
    CHECK_THROWS_AS(c.check_latent(6, 8), ContractError);
    CHECK(UNetConfig::kNormGroups == 8);
    CHECK(UNetConfig::kKernel == 3);
  }

  TEST_CASE("forward preserves shape for several configurations") {
    torch::manual_seed(0);
    torch::NoGradGuard no_grad;
    UNet full_shape(tiny(8, {16, 32}));
    auto out = full_shape->forward(torch::randn({2, 8, 32, 32}), torch::tensor({1, 999}, torch::kLong),
                                    torch::tensor({0, 1}, torch::kLong));
    CHECK(out.sizes() == torch::IntArrayRef({2, 8, 32, 32}));
    for (bool attn : {false, true}) {
      for (auto widths : {std::vector<int>{8}, std::vector<int>{8, 16}, std::vector<int>{8, 16, 16}}) {
        auto c = tiny(4, widths);
        c.attention = attn;
        UNet u(c);
        auto z = torch::randn({3, 4, 4, 4});
        auto y = u->forward(z, torch::tensor({5, 50, 500}, torch::kLong), torch::tensor({0, 1, 1}, torch::kLong));
        CHECK(y.sizes() == z.sizes());
      }
    }
  }

  TEST_CASE("determinism, label sensitivity and label validation") {
    torch::manual_seed(1);
    UNet u(tiny(2));
    u->eval();
    torch::NoGradGuard no_grad;
    testutil::Gen g(1);
    auto z = g.tensor({4, 2, 4, 4});
    auto t = torch::tensor({10, 10, 700, 700}, torch::kLong);
    auto c0 = torch::zeros({4}, torch::kLong);
    auto c1 = torch::ones({4}, torch::kLong);
    auto a = u->forward(z, t, c0);
    CHECK(testutil::bitwise_equal(a, u->forward(z, t, c0)));
    CHECK((a - u->forward(z, t, c1)).norm().item<double>() > 0.0);
    auto emb = u->time_embedding(t);
    CHECK(emb.sizes() == torch::IntArrayRef({4, 16}));
    CHECK(testutil::bitwise_equal(emb, u->time_embedding(t)));
    CHECK(torch::isfinite(u->condition(t, c1)).all().item<bool>());
    CHECK_THROWS_AS(u->forward(z, t, torch::full({4}, 2, torch::kLong)), ContractError);
    CHECK_THROWS_AS(u->forward(z, t, torch::full({4}, -1, torch::kLong)), ContractError);
    CHECK_THROWS_AS(u->forward(g.tensor({1, 3, 4, 4}), t.narrow(0, 0, 1), c0.narrow(0, 0, 1)), ContractError);
  }

  TEST_CASE("diffusion loss") {
    testutil::Gen g(2);
    auto eps = g.tensor({2, 3, 4, 4}, torch::kDouble);
    CHECK(diffusion_loss(eps, eps).item<double>() == 0.0);
    CHECK(diffusion_loss(eps + 0.1, eps).item<double>() == doctest::Approx(0.01).epsilon(1e-9));
    auto other = g.tensor({2, 3, 4, 4}, torch::kDouble);
    double s = 0;
    auto a = eps.flatten(), b = other.flatten();
    for (int64_t i = 0; i < a.numel(); ++i) s += std::pow(a[i].item<double>() - b[i].item<double>(), 2);
    CHECK(std::abs(diffusion_loss(eps, other).item<double>() - s / a.numel()) <= 1e-7);
    CHECK_THROWS_AS(diffusion_loss(eps, other.narrow(0, 0, 1)), ContractError);
  }
}
