#include <doctest.h>

#include <cmath>

#include "pretune/rng.hpp"
#include "pretune/schedule.hpp"

using namespace pretune;

TEST_SUITE_BEGIN("schedule");

TEST_CASE("scaled linear: sqrt(beta) linearly spaced, endpoints exact") {
  auto s = DiffusionSchedule::scaled_linear(1000, 5e-3, 2e-2, 25);
  CHECK(std::fabs(s.betas.front() - 5e-3) <= 1e-12);
  CHECK(std::fabs(s.betas.back() - 2e-2) <= 1e-12);

  const double lo = std::sqrt(5e-3), hi = std::sqrt(2e-2);
  for (int64_t t = 0; t < s.T_train; ++t) {
    const double expect = lo + (hi - lo) * static_cast<double>(t) / (s.T_train - 1);
    CHECK(std::fabs(std::sqrt(s.betas[t]) - expect) <= 1e-12);
  }
}

TEST_CASE("schedule monotonicity invariants") {
  auto s = DiffusionSchedule::scaled_linear(200);
  for (int64_t t = 1; t < s.T_train; ++t) {
    CHECK(s.betas[t] > s.betas[t - 1]);
    CHECK(s.alpha_bars[t] < s.alpha_bars[t - 1]);
    CHECK(s.alpha_bars[t] > 0);
  }
  CHECK(s.alpha_bars.back() < s.alpha_bars.front());
}

TEST_CASE("inference indices: evenly spaced with exact endpoints") {
  auto s = DiffusionSchedule::scaled_linear(1000, 5e-3, 2e-2, 25);
  auto idx = s.inference_indices();
  REQUIRE(idx.size() == 25);
  CHECK(idx.front() == 0);
  CHECK(idx.back() == 999);
  for (size_t i = 1; i < idx.size(); ++i) CHECK(idx[i] > idx[i - 1]);
}

TEST_CASE("forward diffuse: t=0 stays near x0, closed form matches iterative composition") {
  auto s = DiffusionSchedule::scaled_linear(100, 5e-3, 2e-2, 25);
  Rng rng(3);
  std::vector<double> x0(64), noise(64);
  for (auto& v : x0) v = rng.uniform();
  for (auto& v : noise) v = rng.normal();

  auto x_t0 = forward_diffuse(x0, 0, noise, s);
  const double bound = std::sqrt(1.0 - s.alpha_bars[0]) * 5.0;  // generous |noise| envelope
  for (size_t i = 0; i < x0.size(); ++i) CHECK(std::fabs(x_t0[i] - x0[i]) <= bound);

  // iterative oracle: x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) e_t composed
  // with the same total-noise decomposition. Using the closed form per step,
  // composing single-step transitions on the mean path must reproduce the
  // closed-form coefficient on x0 and the total noise scale.
  for (int64_t t : {5L, 37L, 99L}) {
    double coef = 1.0;
    for (int64_t k = 0; k <= t; ++k) coef *= std::sqrt(s.alphas[k]);
    CHECK(std::fabs(coef - std::sqrt(s.alpha_bars[t])) <= 1e-12);
    const double noise_var = 1.0 - coef * coef;
    CHECK(std::fabs(noise_var - (1.0 - s.alpha_bars[t])) <= 1e-12);

    auto closed = forward_diffuse(x0, t, noise, s);
    for (size_t i = 0; i < x0.size(); ++i) {
      const double expect = coef * x0[i] + std::sqrt(noise_var) * noise[i];
      CHECK(std::fabs(closed[i] - expect) <= 1e-5);
    }
  }
}

TEST_CASE("forward diffuse: deterministic and range checked") {
  auto s = DiffusionSchedule::scaled_linear(50);
  Rng rng(4);
  std::vector<double> x0(8), noise(8);
  for (auto& v : x0) v = rng.uniform();
  for (auto& v : noise) v = rng.normal();
  auto a = forward_diffuse(x0, 7, noise, s);
  auto b = forward_diffuse(x0, 7, noise, s);
  CHECK(a == b);
  CHECK_THROWS_AS(forward_diffuse(x0, 50, noise, s), RangeError);
  CHECK_THROWS_AS(forward_diffuse(x0, -1, noise, s), RangeError);
}

TEST_CASE("batched tensor variant matches the flat one") {
  auto s = DiffusionSchedule::scaled_linear(64);
  Rng rng(5);
  Tensor x0 = Tensor::rand_uniform({2, 1, 2, 2, 2}, rng, 0, 1);
  Tensor noise = Tensor::randn(x0.shape(), rng);
  Tensor out = forward_diffuse(x0, {3, 60}, noise, s);
  for (int item = 0; item < 2; ++item) {
    std::vector<double> x(x0.values().begin() + item * 8, x0.values().begin() + (item + 1) * 8);
    std::vector<double> e(noise.values().begin() + item * 8, noise.values().begin() + (item + 1) * 8);
    auto flat = forward_diffuse(x, item == 0 ? 3 : 60, e, s);
    for (int i = 0; i < 8; ++i) {
      CHECK(out.values()[item * 8 + i] == doctest::Approx(flat[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("schedule construction rejects bad parameters") {
  CHECK_THROWS_AS(DiffusionSchedule::scaled_linear(1), ConfigError);
  CHECK_THROWS_AS(DiffusionSchedule::scaled_linear(100, 2e-2, 5e-3), ConfigError);
  CHECK_THROWS_AS(DiffusionSchedule::scaled_linear(100, 5e-3, 2e-2, 101), ConfigError);
}

TEST_SUITE_END();
