#include "encdiff/schedules.hpp"

#include "encdiff/rng.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace encdiff {

std::string to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::cosine: return "cosine";
    case ScheduleKind::linear: return "linear";
    case ScheduleKind::sqrt_linear: return "sqrt_linear";
    case ScheduleKind::sqrt: return "sqrt";
  }
  return "unknown";
}

ScheduleKind parse_schedule_kind(std::string_view name) {
  if (name == "cosine") return ScheduleKind::cosine;
  if (name == "linear") return ScheduleKind::linear;
  if (name == "sqrt_linear") return ScheduleKind::sqrt_linear;
  if (name == "sqrt") return ScheduleKind::sqrt;
  throw std::invalid_argument("unknown schedule kind: " + std::string(name));
}

namespace {

Eigen::ArrayXd linspace(double a, double b, int n) {
  if (n == 1) return Eigen::ArrayXd::Constant(1, a);
  return Eigen::ArrayXd::LinSpaced(n, a, b);
}

double cosine_f(double t, int T) {
  const double c = std::cos(((t / T + kCosineOffset) / (1.0 + kCosineOffset)) * std::numbers::pi / 2.0);
  return c * c;
}

}  // namespace

VarianceSchedule make_schedule(ScheduleKind kind, int T, double beta_start, double beta_end) {
  if (T < 1) throw InvalidRange("schedule needs T >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw InvalidRange("schedule needs 0 < beta_start <= beta_end < 1");

  VarianceSchedule s{kind, T, Eigen::ArrayXd(T)};
  switch (kind) {
    case ScheduleKind::sqrt_linear:
      s.betas = linspace(beta_start, beta_end, T);
      break;
    case ScheduleKind::linear:
      s.betas = linspace(std::sqrt(beta_start), std::sqrt(beta_end), T).square();
      break;
    case ScheduleKind::sqrt:
      s.betas = linspace(beta_start, beta_end, T).sqrt();
      break;
    case ScheduleKind::cosine: {
      const double f0 = cosine_f(0.0, T);
      double prev = 1.0;
      for (int t = 1; t <= T; ++t) {
        const double ab = cosine_f(t, T) / f0;
        s.betas[t - 1] = std::min(1.0 - ab / prev, kMaxBeta);
        prev = ab;
      }
      break;
    }
  }
  return s;
}

DiffusionCoefficients derive_coefficients(const Eigen::ArrayXd& betas) {
  const Eigen::Index T = betas.size();
  DiffusionCoefficients c;
  c.betas = betas;
  c.alphas = 1.0 - betas;
  c.alpha_bars.resize(T);
  c.posterior_var.resize(T);
  c.posterior_coef_x0.resize(T);
  c.posterior_coef_xt.resize(T);
  double prod = 1.0;
  for (Eigen::Index i = 0; i < T; ++i) {
    const double prev = prod;
    prod *= c.alphas[i];
    c.alpha_bars[i] = prod;
    const double denom = 1.0 - prod;
    c.posterior_var[i] = (1.0 - prev) / denom * betas[i];
    c.posterior_coef_x0[i] = std::sqrt(prev) * betas[i] / denom;
    c.posterior_coef_xt[i] = std::sqrt(c.alphas[i]) * (1.0 - prev) / denom;
  }
  return c;
}

std::vector<int> strided_timesteps(int T, int num_steps) {
  if (num_steps < 1 || num_steps > T) throw InvalidRange("num_steps must lie in [1, T]");
  if (num_steps == 1) return {T};
  std::vector<int> ts(num_steps);
  for (int i = 0; i < num_steps; ++i)
    ts[i] = 1 + static_cast<int>(std::lround(static_cast<double>(T - 1) * i / (num_steps - 1)));
  return ts;
}

DiffusionCoefficients respace(const DiffusionCoefficients& c, const std::vector<int>& timesteps) {
  Eigen::ArrayXd betas(static_cast<Eigen::Index>(timesteps.size()));
  double prev = 1.0;
  for (std::size_t i = 0; i < timesteps.size(); ++i) {
    const double ab = c.alpha_bar(timesteps[i]);
    betas[static_cast<Eigen::Index>(i)] = 1.0 - ab / prev;
    prev = ab;
  }
  return derive_coefficients(betas);
}

double gaussian_kl_to_standard_normal(double mean_sq_norm, double var, int n) {
  if (!(var > 0.0)) throw std::domain_error("variance must be positive");
  return 0.5 * n * (var - 1.0 - std::log(var)) + 0.5 * mean_sq_norm;
}

std::vector<CurvePoint> bottleneck_curve_closed_form(const DiffusionCoefficients& c) {
  std::vector<CurvePoint> out;
  out.reserve(static_cast<std::size_t>(std::max(c.T() - 1, 0)));
  for (int t = 2; t <= c.T(); ++t) {
    const double a = c.coef_x0(t), b = c.coef_xt(t), ab = c.alpha_bar(t);
    const double signal = a + b * std::sqrt(ab);
    const double mu_sq_per_dim = signal * signal + b * b * (1.0 - ab);
    out.push_back({t, gaussian_kl_to_standard_normal(mu_sq_per_dim, c.beta_tilde(t), 1)});
  }
  return out;
}

MonteCarloMoments monte_carlo_moments(const MonteCarloSource& src) {
  // mu = (a + b sqrt(ab)) x0 + b sqrt(1 - ab) eps, so E|mu|^2 only needs the
  // three sample averages of |x0|^2, x0.eps and |eps|^2 (common random numbers
  // across t).
  Rng rng(src.seed);
  const bool synthetic = src.data.size() == 0;
  const int n = synthetic ? src.dim : static_cast<int>(src.data.cols());
  double sxx = 0, sxe = 0, see = 0;
  Eigen::VectorXd x0(n), eps(n);
  for (int s = 0; s < src.num_samples; ++s) {
    if (synthetic) {
      for (int i = 0; i < n; ++i) x0[i] = rng.normal();
    } else {
      x0 = src.data.row(rng.uniform_int(0, static_cast<int>(src.data.rows()) - 1)).transpose();
    }
    for (int i = 0; i < n; ++i) eps[i] = rng.normal();
    sxx += x0.squaredNorm();
    sxe += x0.dot(eps);
    see += eps.squaredNorm();
  }
  const double denom = static_cast<double>(src.num_samples) * n;
  return {sxx / denom, sxe / denom, see / denom};
}

std::vector<CurvePoint> bottleneck_curve_monte_carlo(const DiffusionCoefficients& c, const MonteCarloMoments& m) {
  std::vector<CurvePoint> out;
  for (int t = 2; t <= c.T(); ++t) {
    const double a = c.coef_x0(t), b = c.coef_xt(t), ab = c.alpha_bar(t);
    const double c1 = a + b * std::sqrt(ab), c2 = b * std::sqrt(1.0 - ab);
    const double mu_sq_per_dim = c1 * c1 * m.xx + 2.0 * c1 * c2 * m.xe + c2 * c2 * m.ee;
    out.push_back({t, gaussian_kl_to_standard_normal(mu_sq_per_dim, c.beta_tilde(t), 1)});
  }
  return out;
}

std::vector<CurvePoint> bottleneck_curve_monte_carlo(const DiffusionCoefficients& c, const MonteCarloSource& src) {
  return bottleneck_curve_monte_carlo(c, monte_carlo_moments(src));
}

Eigen::MatrixXd standardize_columns(const Eigen::MatrixXd& x) {
  Eigen::MatrixXd out = x.rowwise() - x.colwise().mean();
  const double m = static_cast<double>(x.rows());
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    const double sd = std::sqrt(out.col(j).squaredNorm() / m);
    if (sd > 0) out.col(j) /= sd;
    else out.col(j).setZero();
  }
  return out;
}

}  // namespace encdiff
