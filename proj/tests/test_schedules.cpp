#include "encdiff/rng.hpp"
#include "encdiff/schedules.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace encdiff;

namespace {

// Direct evaluation of the cosine alpha-bar definition, written independently
// of the library loop.
double cosine_beta_reference(int t, int T) {
  auto f = [T](double tt) {
    const double c = std::cos(((tt / T + 0.008) / 1.008) * std::numbers::pi / 2.0);
    return c * c;
  };
  const double ab_t = f(t) / f(0), ab_prev = f(t - 1) / f(0);
  return std::min(1.0 - ab_t / ab_prev, 0.999);
}

}  // namespace

TEST_CASE("sqrt_linear is an equally spaced ramp between the endpoints") {
  const auto s = make_schedule(ScheduleKind::sqrt_linear, 4, 1e-4, 0.02);
  REQUIRE(s.betas.size() == 4);
  CHECK(s.betas[0] == doctest::Approx(0.0001).epsilon(1e-12));
  CHECK(s.betas[1] == doctest::Approx(0.0067333333333).epsilon(1e-9));
  CHECK(s.betas[2] == doctest::Approx(0.0133666666667).epsilon(1e-9));
  CHECK(s.betas[3] == doctest::Approx(0.02).epsilon(1e-12));
  for (int i = 1; i < 3; ++i) CHECK(s.betas[i + 1] - s.betas[i] == doctest::Approx(s.betas[1] - s.betas[0]));
}

TEST_CASE("linear and sqrt formulas") {
  const auto lin = make_schedule(ScheduleKind::linear, 3, 1e-4, 0.04);
  CHECK(lin.betas[0] == doctest::Approx(1e-4));
  CHECK(lin.betas[1] == doctest::Approx(std::pow((0.01 + 0.2) / 2, 2)));
  CHECK(lin.betas[2] == doctest::Approx(0.04));
  const auto sq = make_schedule(ScheduleKind::sqrt, 3, 1e-4, 0.04);
  CHECK(sq.betas[0] == doctest::Approx(0.01));
  CHECK(sq.betas[1] == doctest::Approx(std::sqrt((1e-4 + 0.04) / 2)));
  CHECK(sq.betas[2] == doctest::Approx(0.2));
}

TEST_CASE("cosine schedule matches the direct alpha-bar ratio and clips at the end") {
  const auto s = make_schedule(ScheduleKind::cosine, 1000);
  // frozen from the reference evaluation
  CHECK(s.betas[0] == doctest::Approx(4.128422482196914e-05).epsilon(1e-9));
  for (int t : {1, 2, 10, 500, 900, 999, 1000}) CHECK(s.betas[t - 1] == doctest::Approx(cosine_beta_reference(t, 1000)).epsilon(1e-10));
  CHECK(s.betas[999] == doctest::Approx(0.999));
  CHECK((s.betas > 0.0).all());
  CHECK((s.betas <= 0.999).all());
}

TEST_CASE("invalid ranges are rejected") {
  CHECK_THROWS_AS(make_schedule(ScheduleKind::linear, 0), InvalidRange);
  CHECK_THROWS_AS(make_schedule(ScheduleKind::linear, 10, 0.0, 0.02), InvalidRange);
  CHECK_THROWS_AS(make_schedule(ScheduleKind::linear, 10, 0.03, 0.02), InvalidRange);
  CHECK_THROWS_AS(make_schedule(ScheduleKind::sqrt, 10, 0.01, 1.0), InvalidRange);
}

TEST_CASE("coefficients of a two-step chain") {
  Eigen::ArrayXd b(2);
  b << 0.1, 0.2;
  const auto c = derive_coefficients(b);
  CHECK(c.alphas[0] == doctest::Approx(0.9));
  CHECK(c.alphas[1] == doctest::Approx(0.8));
  CHECK(c.alpha_bars[0] == doctest::Approx(0.9));
  CHECK(c.alpha_bars[1] == doctest::Approx(0.72));
  CHECK(c.beta_tilde(1) == 0.0);
  CHECK(c.beta_tilde(2) == doctest::Approx(0.1 / 0.28 * 0.2));
  CHECK(c.beta_tilde(2) == doctest::Approx(0.0714286).epsilon(1e-6));
}

TEST_CASE("coefficient invariants hold for every schedule kind") {
  for (auto kind : kAllScheduleKinds) {
    const auto c = derive_coefficients(make_schedule(kind, 1000));
    CAPTURE(to_string(kind));
    CHECK(c.beta_tilde(1) == 0.0);
    for (int t = 1; t <= 1000; ++t) {
      if (t > 1) CHECK(c.alpha_bar(t) < c.alpha_bar(t - 1));
      CHECK(c.alpha_bar(t) > 0.0);
      CHECK(c.alpha_bar(t) < 1.0);
      CHECK(c.beta_tilde(t) >= 0.0);
      CHECK(c.beta_tilde(t) <= c.beta(t));
      const double signal = c.coef_x0(t) + c.coef_xt(t) * std::sqrt(c.alpha_bar(t));
      CHECK(signal > 0.0);
      if (t == 1) CHECK(signal == doctest::Approx(1.0).epsilon(1e-12));
      else CHECK(signal < 1.0);
    }
  }
}

TEST_CASE("gaussian KL closed form") {
  CHECK(gaussian_kl_to_standard_normal(0.0, 1.0, 7) == 0.0);
  CHECK(gaussian_kl_to_standard_normal(1.0, 1.0, 2) == doctest::Approx(0.5));
  CHECK(gaussian_kl_to_standard_normal(0.0, std::numbers::e, 1) == doctest::Approx(0.359140914229522).epsilon(1e-12));
  CHECK_THROWS_AS(gaussian_kl_to_standard_normal(0.0, 0.0, 1), std::domain_error);
  CHECK_THROWS_AS(gaussian_kl_to_standard_normal(0.0, -1.0, 1), std::domain_error);
  for (double v : {0.1, 0.5, 0.99, 1.01, 2.0, 5.0})
    for (double m : {0.0, 0.3}) CHECK(gaussian_kl_to_standard_normal(m, v, 3) > 0.0);
}

TEST_CASE("gaussian KL agrees with a Monte-Carlo estimate of the integral") {
  // KL(N(0, e) || N(0, 1)) = E_p[log p(x) - log q(x)]
  Rng rng(5);
  const double var = std::numbers::e, sd = std::sqrt(var);
  const int n = 400000;
  double acc = 0, acc2 = 0;
  for (int i = 0; i < n; ++i) {
    const double x = sd * rng.normal();
    const double lr = -0.5 * std::log(var) - 0.5 * x * x / var + 0.5 * x * x;
    acc += lr;
    acc2 += lr * lr;
  }
  const double mean = acc / n, se = std::sqrt((acc2 / n - mean * mean) / n);
  CHECK(std::abs(mean - gaussian_kl_to_standard_normal(0.0, var, 1)) < 4 * se);
}

TEST_CASE("bottleneck curve grows as t decreases and starts at t = 2") {
  for (auto kind : kAllScheduleKinds) {
    CAPTURE(to_string(kind));
    const auto curve = bottleneck_curve_closed_form(derive_coefficients(make_schedule(kind, 1000)));
    REQUIRE(curve.size() == 999);
    CHECK(curve.front().t == 2);
    CHECK(curve.back().t == 1000);
    for (std::size_t i = 1; i < curve.size(); ++i) {
      CHECK(std::isfinite(curve[i].c_per_dim));
      CHECK(curve[i].c_per_dim < curve[i - 1].c_per_dim);
    }
  }
}

TEST_CASE("Monte-Carlo bottleneck curve converges to the closed form") {
  const auto c = derive_coefficients(make_schedule(ScheduleKind::linear, 200));
  const auto exact = bottleneck_curve_closed_form(c);
  auto worst = [&](int samples) {
    MonteCarloSource src;
    src.num_samples = samples;
    src.dim = 16;
    src.seed = 11;
    const auto mc = bottleneck_curve_monte_carlo(c, src);
    double w = 0;
    for (std::size_t i = 0; i < mc.size(); ++i) w = std::max(w, std::abs(mc[i].c_per_dim / exact[i].c_per_dim - 1));
    return w;
  };
  const double coarse = worst(1000), fine = worst(100000);
  CHECK(fine < coarse);
  CHECK(fine < 0.01);
}

TEST_CASE("strided timesteps and respacing") {
  CHECK(strided_timesteps(1000, 1000).size() == 1000);
  const auto ts = strided_timesteps(1000, 200);
  REQUIRE(ts.size() == 200);
  CHECK(ts.front() == 1);
  CHECK(ts.back() == 1000);
  for (std::size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] > ts[i - 1]);
  CHECK_THROWS(strided_timesteps(10, 11));

  const auto c = derive_coefficients(make_schedule(ScheduleKind::cosine, 1000));
  const auto rc = respace(c, ts);
  for (std::size_t i = 0; i < ts.size(); ++i) CHECK(rc.alpha_bars[static_cast<Eigen::Index>(i)] == doctest::Approx(c.alpha_bar(ts[i])).epsilon(1e-12));
  const auto same = respace(c, strided_timesteps(1000, 1000));
  CHECK((same.betas - c.betas).abs().maxCoeff() < 1e-12);
}
