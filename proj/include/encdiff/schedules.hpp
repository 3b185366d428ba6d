#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace encdiff {

enum class ScheduleKind { cosine, linear, sqrt_linear, sqrt };

std::string to_string(ScheduleKind kind);
ScheduleKind parse_schedule_kind(std::string_view name);
inline constexpr ScheduleKind kAllScheduleKinds[] = {ScheduleKind::cosine, ScheduleKind::linear,
                                                      ScheduleKind::sqrt_linear, ScheduleKind::sqrt};

class InvalidRange : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ScheduleParams {
  ScheduleKind kind = ScheduleKind::cosine;
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

/// A beta sequence. Index i holds beta for timestep t = i + 1.
struct VarianceSchedule {
  ScheduleKind kind = ScheduleKind::cosine;
  int T = 0;
  Eigen::ArrayXd betas;
};

inline constexpr double kCosineOffset = 0.008;
inline constexpr double kMaxBeta = 0.999;

VarianceSchedule make_schedule(ScheduleKind kind, int T, double beta_start = 1e-4, double beta_end = 0.02);
inline VarianceSchedule make_schedule(const ScheduleParams& p) {
  return make_schedule(p.kind, p.T, p.beta_start, p.beta_end);
}

/// Forward-process and posterior coefficients, all indexed by t - 1.
///
/// posterior mean  = coef_x0[t-1] * x0 + coef_xt[t-1] * x_t
/// posterior var   = posterior_var[t-1]    (zero at t = 1 since alpha_bar_0 = 1)
struct DiffusionCoefficients {
  Eigen::ArrayXd betas;
  Eigen::ArrayXd alphas;
  Eigen::ArrayXd alpha_bars;
  Eigen::ArrayXd posterior_var;
  Eigen::ArrayXd posterior_coef_x0;
  Eigen::ArrayXd posterior_coef_xt;

  int T() const { return static_cast<int>(betas.size()); }
  double beta(int t) const { return betas[t - 1]; }
  double alpha(int t) const { return alphas[t - 1]; }
  double alpha_bar(int t) const { return alpha_bars[t - 1]; }
  double alpha_bar_prev(int t) const { return t == 1 ? 1.0 : alpha_bars[t - 2]; }
  double beta_tilde(int t) const { return posterior_var[t - 1]; }
  double coef_x0(int t) const { return posterior_coef_x0[t - 1]; }
  double coef_xt(int t) const { return posterior_coef_xt[t - 1]; }
};

DiffusionCoefficients derive_coefficients(const Eigen::ArrayXd& betas);
inline DiffusionCoefficients derive_coefficients(const VarianceSchedule& s) { return derive_coefficients(s.betas); }

/// Evenly spaced visit set of `num_steps` timesteps in [1, T], ascending,
/// containing both 1 and T when num_steps >= 2.
std::vector<int> strided_timesteps(int T, int num_steps);

/// Coefficients of the reduced chain that only visits `timesteps` (ascending).
/// The reduced chain keeps alpha_bar on the visited steps and rederives betas
/// from consecutive ratios.
DiffusionCoefficients respace(const DiffusionCoefficients& c, const std::vector<int>& timesteps);

/// KL( N(mu, var I_n) || N(0, I_n) ) given mu^T mu.
double gaussian_kl_to_standard_normal(double mean_sq_norm, double var, int n);

struct CurvePoint {
  int t;
  double c_per_dim;
};

/// Source of x0 for the Monte-Carlo bottleneck estimate. When `data` is empty
/// the samples are synthetic i.i.d. N(0, 1) of dimension `dim`; otherwise rows
/// of `data` (already standardized) are drawn uniformly.
struct MonteCarloSource {
  int num_samples = 10000;
  std::uint64_t seed = 0;
  int dim = 3 * 32 * 32;
  Eigen::MatrixXd data;
};

/// Per-dimension information-bottleneck curve C_t / n for t = 2..T.
/// t = 1 is excluded because the posterior variance is zero there and the KL
/// is infinite; callers report that row separately.
std::vector<CurvePoint> bottleneck_curve_closed_form(const DiffusionCoefficients& c);
std::vector<CurvePoint> bottleneck_curve_monte_carlo(const DiffusionCoefficients& c, const MonteCarloSource& src);

/// Per-dimension sample averages of |x0|^2, x0.eps and |eps|^2; they are all
/// the Monte-Carlo curve needs, so one draw can serve several schedules.
struct MonteCarloMoments {
  double xx = 0, xe = 0, ee = 0;
};
MonteCarloMoments monte_carlo_moments(const MonteCarloSource& src);
std::vector<CurvePoint> bottleneck_curve_monte_carlo(const DiffusionCoefficients& c, const MonteCarloMoments& m);

/// Standardize each column to zero mean and unit variance; constant columns become zero.
Eigen::MatrixXd standardize_columns(const Eigen::MatrixXd& x);

}  // namespace encdiff
