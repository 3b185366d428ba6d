#pragma once

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

#include "encdiff/schedules.hpp"

namespace encdiff {

struct Gaussian1D {
  double mean = 0;
  double var = 1;
};

double gaussian_kl(const Gaussian1D& p, const Gaussian1D& q);

enum class MappingKind { affine, monotone_smooth };

/// A differentiable bijection of the real line, or of [lo, hi] for monotone families.
/// Families: "x_plus_tanh" f(x) = x + c tanh(x), "x_plus_cubic" f(x) = x + c x^3.
struct MappingSpec {
  MappingKind kind = MappingKind::affine;
  double a = 1, b = 0;
  std::string family = "x_plus_tanh";
  double c = 0.1;
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();

  static MappingSpec affine(double a, double b) { return {MappingKind::affine, a, b}; }
  static MappingSpec monotone(std::string family, double c) {
    MappingSpec m;
    m.kind = MappingKind::monotone_smooth;
    m.family = std::move(family);
    m.c = c;
    return m;
  }

  /// Throws NonInvertibleMapping unless the map is a differentiable bijection on its domain.
  void validate() const;
  double operator()(double x) const;
  double derivative(double x) const;
  /// Newton iteration from y.
  double inverse(double y) const;
};

class NonInvertibleMapping : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct KlInvarianceResult {
  double kl_before = 0;
  double kl_after = 0;
  double abs_diff = 0;
  double standard_error = 0;  // zero on the closed-form path
  bool closed_form = false;
  long num_samples = 0;
};

/// KL(p || q) against KL(f#p || f#q). Affine maps use the Gaussian closed form on the
/// image distributions; monotone families estimate the mapped KL by Monte-Carlo over
/// samples of p pushed through f, with densities from the change of variables.
KlInvarianceResult kl_invariance_check(const Gaussian1D& p, const Gaussian1D& q, const MappingSpec& f, long num_samples,
                                       std::uint64_t seed);

struct VlbEquivalenceResult {
  double max_relative_error = 0;
  int worst_t = 0;
  int trials = 0;
};

/// Random (x0, eps, t >= 2, eps_theta) trials comparing the reverse-step KL with its
/// weighted noise-prediction form.
VlbEquivalenceResult loss_vlb_equivalence_check(const DiffusionCoefficients& c, int trials, std::uint64_t seed, int dim = 16);

}  // namespace encdiff
