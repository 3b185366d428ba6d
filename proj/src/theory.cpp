#include "encdiff/theory.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "encdiff/diffusion.hpp"
#include "encdiff/rng.hpp"

namespace encdiff {

double gaussian_kl(const Gaussian1D& p, const Gaussian1D& q) {
  if (!(p.var > 0) || !(q.var > 0)) throw std::domain_error("gaussian_kl: variances must be positive");
  const double d = p.mean - q.mean;
  return 0.5 * (std::log(q.var / p.var) + (p.var + d * d) / q.var - 1.0);
}

void MappingSpec::validate() const {
  if (kind == MappingKind::affine) {
    if (a == 0 || !std::isfinite(a) || !std::isfinite(b)) throw NonInvertibleMapping("affine map needs finite a != 0");
    return;
  }
  if (!(lo < hi)) throw NonInvertibleMapping("empty mapping domain");
  if (family == "x_plus_tanh") {
    // f' = 1 + c sech^2 x, which reaches 1 + c at x = 0
    if (!(c > -1)) throw NonInvertibleMapping("x + c tanh(x) is not invertible for c <= -1");
  } else if (family == "x_plus_cubic") {
    // f' = 1 + 3 c x^2
    if (c < 0) {
      const double edge = std::max(std::abs(lo), std::abs(hi));
      if (!std::isfinite(edge) || 1 + 3 * c * edge * edge <= 0)
        throw NonInvertibleMapping("x + c x^3 with c < 0 is not monotone on the domain");
    }
  } else {
    throw NonInvertibleMapping("unknown mapping family '" + family + "'");
  }
}

double MappingSpec::operator()(double x) const {
  if (kind == MappingKind::affine) return a * x + b;
  if (family == "x_plus_tanh") return x + c * std::tanh(x);
  return x + c * x * x * x;
}

double MappingSpec::derivative(double x) const {
  if (kind == MappingKind::affine) return a;
  if (family == "x_plus_tanh") {
    const double s = 1.0 / std::cosh(x);
    return 1 + c * s * s;
  }
  return 1 + 3 * c * x * x;
}

double MappingSpec::inverse(double y) const {
  if (kind == MappingKind::affine) return (y - b) / a;
  double x = y;
  for (int it = 0; it < 100; ++it) {
    const double step = ((*this)(x) - y) / derivative(x);
    x -= step;
    if (std::abs(step) <= 1e-15 * std::max(1.0, std::abs(x))) break;
  }
  return x;
}

KlInvarianceResult kl_invariance_check(const Gaussian1D& p, const Gaussian1D& q, const MappingSpec& f, long num_samples,
                                       std::uint64_t seed) {
  if (!(p.var > 0) || !(q.var > 0)) throw std::domain_error("kl_invariance_check: variances must be positive");
  f.validate();
  KlInvarianceResult out;
  out.kl_before = gaussian_kl(p, q);
  if (f.kind == MappingKind::affine) {
    const Gaussian1D fp{f.a * p.mean + f.b, f.a * f.a * p.var};
    const Gaussian1D fq{f.a * q.mean + f.b, f.a * f.a * q.var};
    out.kl_after = gaussian_kl(fp, fq);
    out.closed_form = true;
  } else {
    if (num_samples < 2) throw std::invalid_argument("kl_invariance_check: need at least 2 samples");
    auto log_normal = [](double x, const Gaussian1D& g) {
      const double d = x - g.mean;
      return -0.5 * (std::log(2 * std::numbers::pi * g.var) + d * d / g.var);
    };
    Rng rng(seed);
    const double sp = std::sqrt(p.var);
    double mean = 0, m2 = 0;
    for (long i = 0; i < num_samples; ++i) {
      const double y = f(p.mean + sp * rng.normal());
      const double x = f.inverse(y);
      const double log_jac = std::log(std::abs(f.derivative(x)));
      const double log_py = log_normal(x, p) - log_jac;
      const double log_qy = log_normal(x, q) - log_jac;
      const double v = log_py - log_qy;
      const double delta = v - mean;
      mean += delta / static_cast<double>(i + 1);
      m2 += delta * (v - mean);
    }
    out.kl_after = mean;
    out.standard_error = std::sqrt(m2 / static_cast<double>(num_samples - 1) / static_cast<double>(num_samples));
    out.num_samples = num_samples;
  }
  out.abs_diff = std::abs(out.kl_after - out.kl_before);
  return out;
}

VlbEquivalenceResult loss_vlb_equivalence_check(const DiffusionCoefficients& c, int trials, std::uint64_t seed, int dim) {
  if (trials < 1) throw std::invalid_argument("loss_vlb_equivalence_check: trials must be >= 1");
  if (c.T() < 2) throw std::invalid_argument("loss_vlb_equivalence_check: needs T >= 2");
  Rng rng(seed);
  VlbEquivalenceResult out;
  out.trials = trials;
  ArrayX<double> x0(dim), eps(dim), eps_theta(dim);
  for (int k = 0; k < trials; ++k) {
    const int t = rng.uniform_int(2, c.T());
    for (int i = 0; i < dim; ++i) {
      x0(i) = rng.normal();
      eps(i) = rng.normal();
      eps_theta(i) = rng.normal();
    }
    const auto noisy = forward_noise<double>(x0, t, eps, c);
    const double lhs = vlb_kl_term<double>(eps_theta, x0, noisy.x_t, t, c);
    const double rhs = vlb_eps_weight(c, t) * (eps - eps_theta).matrix().squaredNorm();
    const double rel = std::abs(lhs - rhs) / std::max(std::abs(rhs), std::numeric_limits<double>::min());
    if (k == 0 || rel > out.max_relative_error) {
      out.max_relative_error = rel;
      out.worst_t = t;
    }
  }
  return out;
}

}  // namespace encdiff
