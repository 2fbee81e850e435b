#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "hcvrp/common.hpp"

namespace hcvrp::stats {

namespace detail {

// Continued fraction for the regularized incomplete beta (Lentz's method).
inline double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  return h;  // converged enough for the dof used here
}

}  // namespace detail

// Regularized incomplete beta function I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  require(a > 0.0 && b > 0.0, "incomplete_beta: a, b must be positive");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) -
                          std::lgamma(b) + a * std::log(x) +
                          b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0))
    return front * detail::betacf(a, b, x) / a;
  return 1.0 - front * detail::betacf(b, a, 1.0 - x) / b;
}

// P(T <= t) for Student's t with `dof` degrees of freedom.
inline double student_t_cdf(double t, double dof) {
  require(dof > 0.0, "student_t_cdf: dof must be positive");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double x = dof / (dof + t * t);
  const double tail = 0.5 * incomplete_beta(dof / 2.0, 0.5, x);
  return t >= 0.0 ? 1.0 - tail : tail;
}

struct PairedTTest {
  double t_statistic = 0.0;
  double p_value = 1.0;
  double mean_diff = 0.0;
  bool degenerate = false;  // zero-variance differences
};

// One-sided paired t-test of H1: mean(new - old) < 0. Zero-variance inputs
// short-circuit: uniformly better rejects, identical keeps.
inline PairedTTest one_sided_paired_ttest(std::span<const double> new_costs,
                                          std::span<const double> old_costs) {
  require(new_costs.size() == old_costs.size() && new_costs.size() >= 2,
          "one_sided_paired_ttest: need at least two pairs");
  const double n = static_cast<double>(new_costs.size());
  PairedTTest result;
  double mean = 0.0;
  for (std::size_t i = 0; i < new_costs.size(); ++i)
    mean += new_costs[i] - old_costs[i];
  mean /= n;
  double ss = 0.0;
  for (std::size_t i = 0; i < new_costs.size(); ++i) {
    const double d = (new_costs[i] - old_costs[i]) - mean;
    ss += d * d;
  }
  result.mean_diff = mean;
  const double var = ss / (n - 1.0);
  if (var == 0.0) {
    result.degenerate = true;
    result.p_value = mean < 0.0 ? 0.0 : 1.0;
    result.t_statistic = mean < 0.0
                             ? -std::numeric_limits<double>::infinity()
                             : (mean > 0.0
                                    ? std::numeric_limits<double>::infinity()
                                    : 0.0);
    if (mean == 0.0) result.p_value = 1.0;
    return result;
  }
  result.t_statistic = mean / std::sqrt(var / n);
  result.p_value = student_t_cdf(result.t_statistic, n - 1.0);
  return result;
}

}  // namespace hcvrp::stats
