#pragma once

#include "encdiff/rng.hpp"
#include "encdiff/schedules.hpp"

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

namespace encdiff {

template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

class ShapeMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
struct NoisyState {
  ArrayX<Scalar> x_t;
  int t = 1;
  std::optional<ArrayX<Scalar>> eps;
};

inline void check_timestep(const DiffusionCoefficients& c, int t) {
  if (t < 1 || t > c.T()) throw std::out_of_range("timestep outside [1, T]");
}

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
template <typename Scalar>
NoisyState<Scalar> forward_noise(const ArrayX<Scalar>& x0, int t, const ArrayX<Scalar>& eps,
                                 const DiffusionCoefficients& c) {
  if (x0.size() != eps.size()) throw ShapeMismatch("forward_noise: x0 and eps differ in size");
  check_timestep(c, t);
  const auto ab = c.alpha_bar(t);
  const Scalar s0 = static_cast<Scalar>(std::sqrt(ab));
  const Scalar s1 = static_cast<Scalar>(std::sqrt(1.0 - ab));
  return {s0 * x0 + s1 * eps, t, eps};
}

template <typename Scalar>
ArrayX<Scalar> predict_x0_from_eps(const ArrayX<Scalar>& x_t, int t, const ArrayX<Scalar>& eps_hat,
                                   const DiffusionCoefficients& c) {
  if (x_t.size() != eps_hat.size()) throw ShapeMismatch("predict_x0_from_eps: size mismatch");
  const auto ab = c.alpha_bar(t);
  return (x_t - static_cast<Scalar>(std::sqrt(1.0 - ab)) * eps_hat) / static_cast<Scalar>(std::sqrt(ab));
}

template <typename Scalar>
ArrayX<Scalar> posterior_mean(const ArrayX<Scalar>& x0, const ArrayX<Scalar>& x_t, int t,
                              const DiffusionCoefficients& c) {
  if (x0.size() != x_t.size()) throw ShapeMismatch("posterior_mean: size mismatch");
  return static_cast<Scalar>(c.coef_x0(t)) * x0 + static_cast<Scalar>(c.coef_xt(t)) * x_t;
}

/// Weight w_t with KL(q(x_{t-1}|x_t,x0) || p_theta) = w_t |eps - eps_theta|^2
/// when both Gaussians share the posterior variance.
inline double vlb_eps_weight(const DiffusionCoefficients& c, int t) {
  const double b = c.beta(t);
  return b * b / (2.0 * c.beta_tilde(t) * c.alpha(t) * (1.0 - c.alpha_bar(t)));
}

/// KL between the true posterior and the model's reverse step, both with
/// variance beta_tilde_t. `eps_theta` is the model's noise prediction at (x_t, t).
template <typename Scalar>
double vlb_kl_term(const ArrayX<Scalar>& eps_theta, const ArrayX<Scalar>& x0, const ArrayX<Scalar>& x_t, int t,
                   const DiffusionCoefficients& c) {
  if (t < 2) throw std::domain_error("vlb_kl_term needs t >= 2; t = 1 is the decoder term");
  const ArrayX<Scalar> mu_true = posterior_mean(x0, x_t, t, c);
  const ArrayX<Scalar> mu_model = posterior_mean(predict_x0_from_eps(x_t, t, eps_theta, c), x_t, t, c);
  return static_cast<double>((mu_true - mu_model).matrix().squaredNorm()) / (2.0 * c.beta_tilde(t));
}

template <typename Scalar>
using EpsFn = std::function<ArrayX<Scalar>(const ArrayX<Scalar>& x_t, int t)>;

struct SamplerConfig {
  int num_steps = 200;
  bool stochastic = false;
  std::uint64_t seed = 0;
  /// Clamp each x0 estimate to the data range [-1, 1].
  bool clip_denoised = true;
};

/// Called once per visited timestep with the state before the update and the
/// x0 estimate made there.
template <typename Scalar>
using TrajectoryFn = std::function<void(int t, const ArrayX<Scalar>& x_t, const ArrayX<Scalar>& x0_hat)>;

/// Reverse process from a given x_T. With num_steps < T the chain visits an
/// evenly spaced subsequence and uses coefficients rederived on it. The model
/// always sees the original timestep index.
template <typename Scalar>
ArrayX<Scalar> ancestral_sample(const EpsFn<Scalar>& eps_fn, ArrayX<Scalar> x, const DiffusionCoefficients& c,
                                const SamplerConfig& cfg, const TrajectoryFn<Scalar>& visit = {}) {
  const std::vector<int> ts = strided_timesteps(c.T(), cfg.num_steps);
  const DiffusionCoefficients rc = respace(c, ts);
  Rng rng(cfg.seed ^ 0xA5A5A5A5ULL);
  for (int i = static_cast<int>(ts.size()); i >= 1; --i) {
    const int t = ts[static_cast<std::size_t>(i - 1)];
    const ArrayX<Scalar> eps_hat = eps_fn(x, t);
    if (!eps_hat.allFinite()) throw NonFiniteError("sampler: non-finite noise prediction at t=" + std::to_string(t));
    ArrayX<Scalar> x0_hat = predict_x0_from_eps(x, i, eps_hat, rc);
    if (cfg.clip_denoised) x0_hat = x0_hat.max(Scalar(-1)).min(Scalar(1));
    if (visit) visit(t, x, x0_hat);
    if (i == 1) {
      x = x0_hat;
      break;
    }
    ArrayX<Scalar> next = posterior_mean(x0_hat, x, i, rc);
    if (cfg.stochastic) {
      const Scalar sd = static_cast<Scalar>(std::sqrt(rc.beta_tilde(i)));
      for (Eigen::Index k = 0; k < next.size(); ++k) next[k] += sd * static_cast<Scalar>(rng.normal());
    }
    x = std::move(next);
  }
  return x;
}

/// Same as above, drawing x_T ~ N(0, I) of size `n` from the config seed.
template <typename Scalar>
ArrayX<Scalar> ancestral_sample(const EpsFn<Scalar>& eps_fn, Eigen::Index n, const DiffusionCoefficients& c,
                                const SamplerConfig& cfg, const TrajectoryFn<Scalar>& visit = {}) {
  Rng rng(cfg.seed);
  ArrayX<Scalar> x(n);
  for (Eigen::Index k = 0; k < n; ++k) x[k] = static_cast<Scalar>(rng.normal());
  return ancestral_sample<Scalar>(eps_fn, std::move(x), c, cfg, visit);
}

}  // namespace encdiff
