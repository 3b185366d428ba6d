#pragma once

// Central finite-difference gradient checks, independent of the analytic
// backward passes they verify.

#include "encdiff/ops.hpp"
#include "encdiff/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace gradcheck {

using encdiff::ag::Tensor;

struct Result {
  double max_rel_error = 0.0;
  int checked = 0;
};

/// `loss` rebuilds the scalar loss from the current values of `inputs`.
/// Checks `fraction` of each input's elements (at least one).
inline Result check(const std::function<Tensor<double>()>& loss, std::vector<Tensor<double>> inputs, double fraction = 1.0,
                    std::uint64_t seed = 0, double h = 1e-6, double floor = 1e-7) {
  for (auto& t : inputs) t.zero_grad();
  auto L = loss();
  encdiff::ag::backward(L);
  std::vector<encdiff::ag::Array<double>> analytic;
  for (auto& t : inputs) analytic.push_back(t.grad());

  encdiff::Rng rng(seed);
  Result r;
  encdiff::ag::NoGradGuard guard;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& v = inputs[k].value();
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      if (fraction < 1.0 && rng.uniform() >= fraction && !(i == 0)) continue;
      const double orig = v[i];
      v[i] = orig + h;
      const double lp = loss().item();
      v[i] = orig - h;
      const double lm = loss().item();
      v[i] = orig;
      const double num = (lp - lm) / (2 * h);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(num), floor});
      r.max_rel_error = std::max(r.max_rel_error, std::abs(a - num) / denom);
      ++r.checked;
    }
  }
  return r;
}

inline encdiff::ag::Array<double> random_array(Eigen::Index n, encdiff::Rng& rng, double scale = 1.0) {
  encdiff::ag::Array<double> a(n);
  for (auto& x : a) x = scale * rng.normal();
  return a;
}

inline Tensor<double> random_param(encdiff::ag::Shape s, encdiff::Rng& rng, double scale = 1.0) {
  return Tensor<double>::parameter(s, random_array(encdiff::ag::numel(s), rng, scale));
}

}  // namespace gradcheck
