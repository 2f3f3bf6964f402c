#pragma once

#include "kgmark/core.hpp"

namespace kgmark {

namespace detail {

inline constexpr int kGammaMaxIter = 100000;
inline constexpr double kGammaEps = 1e-16;

/// log of sum_{n>=0} x^n / (a (a+1) ... (a+n)).
inline double gamma_series_log_sum(double a, double x) {
  double ap = a;
  double del = 1.0 / a;
  double sum = del;
  for (int i = 0; i < kGammaMaxIter; ++i) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::abs(del) < std::abs(sum) * kGammaEps) return std::log(sum);
  }
  throw NumericError("incomplete gamma series did not converge");
}

/// Modified Lentz continued fraction for Q(a, x) without its prefactor; returns log.
inline double gamma_cf_log(double a, double x) {
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < kGammaMaxIter; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kGammaEps) return std::log(h);
  }
  throw NumericError("incomplete gamma continued fraction did not converge");
}

inline void check_gamma_args(double a, double x) {
  if (!std::isfinite(a) || !std::isfinite(x)) throw NumericError("incomplete gamma: non-finite input");
  if (!(a > 0.0)) throw ConfigError("incomplete gamma: a must be > 0");
  if (x < 0.0) throw ConfigError("incomplete gamma: x must be >= 0");
}

inline double log1mexp(double v) {
  // log(1 - exp(v)) for v <= 0
  return v > -std::numbers::ln2 ? std::log(-std::expm1(v)) : std::log1p(-std::exp(v));
}

}  // namespace detail

/// log P(a, x), regularized lower incomplete gamma.
inline double log_gamma_p(double a, double x) {
  detail::check_gamma_args(a, x);
  if (x == 0.0) return -std::numeric_limits<double>::infinity();
  const double prefix = -x + a * std::log(x) - std::lgamma(a);
  if (x < a + 1.0) return prefix + detail::gamma_series_log_sum(a, x);
  return detail::log1mexp(prefix + detail::gamma_cf_log(a, x));
}

/// log Q(a, x) = log(1 - P(a, x)).
inline double log_gamma_q(double a, double x) {
  detail::check_gamma_args(a, x);
  if (x == 0.0) return 0.0;
  const double prefix = -x + a * std::log(x) - std::lgamma(a);
  if (x < a + 1.0) return detail::log1mexp(prefix + detail::gamma_series_log_sum(a, x));
  return prefix + detail::gamma_cf_log(a, x);
}

inline double gamma_p(double a, double x) { return std::exp(log_gamma_p(a, x)); }
inline double gamma_q(double a, double x) { return std::exp(log_gamma_q(a, x)); }

inline double chi2_cdf(double x, double k) {
  if (!(k > 0.0)) throw ConfigError("chi2_cdf: dof must be > 0");
  return gamma_p(0.5 * k, 0.5 * x);
}

/// log P(chi2_{k,lambda} <= x) via the Poisson(lambda/2) mixture of central CDFs.
/// Summation stops once the bound on the remaining mass, P_j * (Poisson tail from j),
/// falls below 1e-14 of the accumulated value.
inline double chi2_noncentral_log_cdf(double x, double k, double lambda) {
  if (!std::isfinite(x) || !std::isfinite(k) || !std::isfinite(lambda))
    throw NumericError("chi2_noncentral_cdf: non-finite input");
  if (!(k > 0.0)) throw ConfigError("chi2_noncentral_cdf: dof must be > 0");
  if (lambda < 0.0) throw ConfigError("chi2_noncentral_cdf: lambda must be >= 0");
  if (x < 0.0) throw ConfigError("chi2_noncentral_cdf: x must be >= 0");
  if (x == 0.0) return -std::numeric_limits<double>::infinity();
  if (lambda == 0.0) return log_gamma_p(0.5 * k, 0.5 * x);

  const double mu = 0.5 * lambda;
  const double log_mu = std::log(mu);
  const double tol = std::log(1e-14);
  double acc = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < detail::kGammaMaxIter; ++j) {
    const double jd = static_cast<double>(j);
    const double log_w = -mu + jd * log_mu - std::lgamma(jd + 1.0);
    const double log_p = log_gamma_p(0.5 * k + jd, 0.5 * x);
    const double term = log_w + log_p;
    if (term > acc) {
      acc = term + std::log1p(std::exp(acc - term));
    } else {
      acc = acc + std::log1p(std::exp(term - acc));
    }
    if (jd + 1.0 > mu) {
      // sum_{i>j} w_i <= w_{j+1} / (1 - mu/(j+2)), and P_i <= P_j for i > j
      const double log_w_next = log_w + log_mu - std::log(jd + 1.0);
      const double log_tail = log_w_next - std::log1p(-mu / (jd + 2.0)) + log_p;
      if (log_tail - acc < tol) return std::min(acc, 0.0);
    }
  }
  throw NumericError("chi2_noncentral_cdf: series did not converge");
}

inline double chi2_noncentral_cdf(double x, double k, double lambda) {
  return std::exp(chi2_noncentral_log_cdf(x, k, lambda));
}

}  // namespace kgmark
