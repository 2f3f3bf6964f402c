#pragma once

#include "kgmark/io.hpp"

#include <memory>
#include <optional>

namespace kgmark {

/// Cumulative signal levels abar_t for t = 0..T.
class NoiseSchedule {
 public:
  NoiseSchedule() : NoiseSchedule(linear(75)) {}

  explicit NoiseSchedule(std::vector<double> alphas, std::string type = "custom",
                         double alpha_start = 0.0, double alpha_end = 0.0)
      : alphas_(std::move(alphas)), type_(std::move(type)) {
    if (alphas_.size() < 2) throw ConfigError("NoiseSchedule: need at least 2 levels");
    for (std::size_t t = 0; t < alphas_.size(); ++t) {
      if (!(alphas_[t] > 0.0 && alphas_[t] <= 1.0))
        throw ConfigError("NoiseSchedule: abar_" + std::to_string(t) + " outside (0, 1]");
      if (t > 0 && !(alphas_[t] < alphas_[t - 1]))
        throw ConfigError("NoiseSchedule: abar must be strictly decreasing");
    }
    alpha_start_ = type_ == "linear" ? alpha_start : alphas_.front();
    alpha_end_ = type_ == "linear" ? alpha_end : alphas_.back();
  }

  static NoiseSchedule linear(std::size_t T, double alpha_start = 0.9999, double alpha_end = 0.01) {
    if (T < 1) throw ConfigError("NoiseSchedule: T must be >= 1");
    if (!(alpha_start > alpha_end)) throw ConfigError("NoiseSchedule: alpha_start <= alpha_end");
    std::vector<double> a(T + 1);
    for (std::size_t t = 0; t <= T; ++t)
      a[t] = (alpha_start * static_cast<double>(T - t) + alpha_end * static_cast<double>(t)) /
             static_cast<double>(T);
    return NoiseSchedule(std::move(a), "linear", alpha_start, alpha_end);
  }

  std::size_t T() const { return alphas_.size() - 1; }

  double alpha_bar(std::size_t t) const {
    if (t > T()) throw IndexError("NoiseSchedule: step " + std::to_string(t) + " > T");
    return alphas_[t];
  }

  const std::vector<double>& alphas() const { return alphas_; }
  const std::string& type() const { return type_; }

  json to_json() const {
    json j{{"type", type_}, {"T", T()}, {"alpha_start", alpha_start_}, {"alpha_end", alpha_end_}};
    if (type_ != "linear") j["alphas"] = alphas_;
    return j;
  }

  static NoiseSchedule from_json(const json& j) {
    try {
      const auto type = j.at("type").get<std::string>();
      if (type == "linear")
        return linear(j.at("T").get<std::size_t>(), j.at("alpha_start").get<double>(),
                      j.at("alpha_end").get<double>());
      if (type == "custom") return NoiseSchedule(j.at("alphas").get<std::vector<double>>());
      throw ConfigError("unknown schedule type '" + type + "'");
    } catch (const json::exception& e) {
      throw ParseError(std::string("schedule: ") + e.what());
    }
  }

 private:
  std::vector<double> alphas_;
  std::string type_;
  double alpha_start_ = 0.0;
  double alpha_end_ = 0.0;
};

class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual Matrix predict(const Matrix& z, std::size_t t) const = 0;
  /// c such that predict(z, t) == c * z for every z, when the predictor is linear-scalar.
  virtual std::optional<double> gain(std::size_t /*t*/) const { return std::nullopt; }
  virtual json to_json() const = 0;
};

class ZeroPredictor final : public NoisePredictor {
 public:
  Matrix predict(const Matrix& z, std::size_t) const override {
    return Matrix::Zero(z.rows(), z.cols());
  }
  std::optional<double> gain(std::size_t) const override { return 0.0; }
  json to_json() const override { return {{"type", "zero"}}; }
};

/// eps_hat = c_t * z with one scalar per step.
class LinearPredictor final : public NoisePredictor {
 public:
  explicit LinearPredictor(std::vector<double> coeffs) : coeffs_(std::move(coeffs)) {
    for (double c : coeffs_)
      if (!std::isfinite(c)) throw ConfigError("LinearPredictor: non-finite coefficient");
  }

  static LinearPredictor constant(std::size_t T, double c) {
    return LinearPredictor(std::vector<double>(T + 1, c));
  }

  /// Least squares c_t = <eps, Z_t> / <Z_t, Z_t> over forward-diffused copies of
  /// the given grids, noise drawn from the seed.
  static LinearPredictor fit(const std::vector<Matrix>& grids, const NoiseSchedule& sched,
                             std::uint64_t seed) {
    if (grids.empty()) throw ConfigError("LinearPredictor::fit: no grids");
    Rng rng(derive_seed(seed, "linear-predictor"));
    std::vector<double> num(sched.T() + 1, 0.0), den(sched.T() + 1, 0.0);
    for (const Matrix& z0 : grids) {
      for (std::size_t t = 1; t <= sched.T(); ++t) {
        const Matrix eps = rng.normal_matrix(z0.rows(), z0.cols());
        const double a = sched.alpha_bar(t);
        const Matrix zt = std::sqrt(a) * z0 + std::sqrt(1.0 - a) * eps;
        num[t] += (eps.array() * zt.array()).sum();
        den[t] += zt.squaredNorm();
      }
    }
    std::vector<double> c(sched.T() + 1, 0.0);
    for (std::size_t t = 1; t <= sched.T(); ++t) c[t] = den[t] > 0.0 ? num[t] / den[t] : 0.0;
    return LinearPredictor(std::move(c));
  }

  /// Fit on seeded N(0,1) grids of the given shape: the stand-in for a pretrained model.
  static LinearPredictor pretrained(const NoiseSchedule& sched, Eigen::Index rows,
                                    Eigen::Index cols, std::uint64_t seed, std::size_t n_grids = 8) {
    Rng rng(derive_seed(seed, "pretrain-grids"));
    std::vector<Matrix> grids;
    for (std::size_t i = 0; i < n_grids; ++i) grids.push_back(rng.normal_matrix(rows, cols));
    return fit(grids, sched, seed);
  }

  Matrix predict(const Matrix& z, std::size_t t) const override { return coeff(t) * z; }
  std::optional<double> gain(std::size_t t) const override { return coeff(t); }

  double coeff(std::size_t t) const {
    if (t >= coeffs_.size()) throw IndexError("LinearPredictor: step out of range");
    return coeffs_[t];
  }
  const std::vector<double>& coeffs() const { return coeffs_; }

  json to_json() const override { return {{"type", "linear"}, {"coeffs", coeffs_}}; }

 private:
  std::vector<double> coeffs_;
};

/// Returns a fixed noise grid regardless of state.
class FixedNoisePredictor final : public NoisePredictor {
 public:
  explicit FixedNoisePredictor(Matrix eps) : eps_(std::move(eps)) {}
  Matrix predict(const Matrix&, std::size_t) const override { return eps_; }
  json to_json() const override { return {{"type", "fixed"}}; }

 private:
  Matrix eps_;
};

inline std::shared_ptr<NoisePredictor> predictor_from_json(const json& j) {
  try {
    const auto type = j.at("type").get<std::string>();
    if (type == "zero") return std::make_shared<ZeroPredictor>();
    if (type == "linear")
      return std::make_shared<LinearPredictor>(j.at("coeffs").get<std::vector<double>>());
    throw ConfigError("unknown predictor type '" + type + "'");
  } catch (const json::exception& e) {
    throw ParseError(std::string("predictor: ") + e.what());
  }
}

namespace detail {

inline Matrix checked_predict(const NoisePredictor& pred, const Matrix& z, std::size_t t) {
  Matrix eps = pred.predict(z, t);
  if (eps.rows() != z.rows() || eps.cols() != z.cols())
    throw ShapeError("noise predictor returned " + shape_str(eps.rows(), eps.cols()) +
                     " for input " + shape_str(z.rows(), z.cols()));
  return eps;
}

inline double checked_sqrt_alpha(const NoiseSchedule& sched, std::size_t t) {
  const double a = sched.alpha_bar(t);
  if (a < 1e-12) throw NumericError("abar_" + std::to_string(t) + " below 1e-12");
  return std::sqrt(a);
}

inline void check_eta(double eta) {
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("eta must lie in [0, 1]");
}

}  // namespace detail

inline Matrix forward_diffuse(const Matrix& z0, std::size_t t, const Matrix& eps,
                              const NoiseSchedule& sched) {
  require_same_shape(z0, eps, "forward_diffuse");
  if (t > sched.T()) throw IndexError("forward_diffuse: step out of range");
  const double a = sched.alpha_bar(t);
  return std::sqrt(a) * z0 + std::sqrt(1.0 - a) * eps;
}

inline Matrix clean_from_noise(const Matrix& zt, const Matrix& eps, std::size_t t,
                               const NoiseSchedule& sched) {
  const double sa = detail::checked_sqrt_alpha(sched, t);
  return (zt - std::sqrt(1.0 - sched.alpha_bar(t)) * eps) / sa;
}

inline Matrix predict_clean(const Matrix& zt, std::size_t t, const NoisePredictor& pred,
                            const NoiseSchedule& sched) {
  if (t > sched.T()) throw IndexError("predict_clean: step out of range");
  return clean_from_noise(zt, detail::checked_predict(pred, zt, t), t, sched);
}

/// One sampling move t -> t_prev (t_prev < t).
inline Matrix ddim_step(const Matrix& zt, std::size_t t, std::size_t t_prev,
                        const NoisePredictor& pred, const NoiseSchedule& sched, double eta = 0.0) {
  if (t == 0) throw IndexError("ddim_step: t must be >= 1");
  if (t > sched.T()) throw IndexError("ddim_step: step out of range");
  if (t_prev >= t) throw ConfigError("ddim_step: t_prev must be below t");
  detail::check_eta(eta);
  const Matrix eps = detail::checked_predict(pred, zt, t);
  const Matrix z0 = clean_from_noise(zt, eps, t, sched);
  const double ap = sched.alpha_bar(t_prev);
  return std::sqrt(ap) * z0 + std::sqrt(1.0 - ap) * eta * eps;
}

inline Matrix ddim_step(const Matrix& zt, std::size_t t, const NoisePredictor& pred,
                        const NoiseSchedule& sched, double eta = 0.0) {
  if (t == 0) throw IndexError("ddim_step: t must be >= 1");
  return ddim_step(zt, t, t - 1, pred, sched, eta);
}

/// Inverse move t_prev -> t, treating eps_hat = pred(z_prev, t) as fixed.
inline Matrix ddim_invert_step(const Matrix& z_prev, std::size_t t_prev, std::size_t t,
                               const NoisePredictor& pred, const NoiseSchedule& sched,
                               double eta = 0.0) {
  if (t_prev >= t) throw ConfigError("ddim_invert_step: t must be above t_prev");
  if (t > sched.T()) throw IndexError("ddim_invert_step: step out of range");
  detail::check_eta(eta);
  const Matrix eps = detail::checked_predict(pred, z_prev, t);
  const double sp = detail::checked_sqrt_alpha(sched, t_prev);
  const Matrix z0 = (z_prev - std::sqrt(1.0 - sched.alpha_bar(t_prev)) * eta * eps) / sp;
  const double a = sched.alpha_bar(t);
  return std::sqrt(a) * z0 + std::sqrt(1.0 - a) * eps;
}

/// n steps t_i = round(i*T/n), i = 1..n, ascending and duplicate-free.
inline std::vector<std::size_t> evenly_spaced_steps(std::size_t T, std::size_t n) {
  if (n < 1 || n > T) throw ConfigError("step count must lie in [1, T]");
  std::vector<std::size_t> steps;
  for (std::size_t i = 1; i <= n; ++i) {
    const auto t = static_cast<std::size_t>(
        std::llround(static_cast<double>(i) * static_cast<double>(T) / static_cast<double>(n)));
    if (steps.empty() || t > steps.back()) steps.push_back(t);
  }
  return steps;
}

inline std::vector<std::size_t> descending(std::vector<std::size_t> steps) {
  std::reverse(steps.begin(), steps.end());
  return steps;
}

/// Sampling over a strictly descending list s_1 > ... > s_k >= 1; the last move lands on 0.
inline Matrix ddim_sample(const Matrix& zT, const std::vector<std::size_t>& steps,
                          const NoisePredictor& pred, const NoiseSchedule& sched,
                          double eta = 0.0) {
  if (steps.empty()) throw ConfigError("ddim_sample: empty step list");
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (steps[i] == 0 || steps[i] > sched.T()) throw IndexError("ddim_sample: step out of range");
    if (i > 0 && steps[i] >= steps[i - 1])
      throw ConfigError("ddim_sample: step list must be strictly descending");
  }
  Matrix z = zT;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const std::size_t t_prev = i + 1 < steps.size() ? steps[i + 1] : 0;
    z = ddim_step(z, steps[i], t_prev, pred, sched, eta);
  }
  return z;
}

/// States visited by inversion: times[0] = 0, states[0] = Z_0, then one per step.
struct Trajectory {
  std::vector<std::size_t> times;
  std::vector<Matrix> states;

  const Matrix& final_state() const { return states.back(); }

  const Matrix& at(std::size_t t) const {
    for (std::size_t i = 0; i < times.size(); ++i)
      if (times[i] == t) return states[i];
    throw IndexError("trajectory has no state at step " + std::to_string(t));
  }

  bool has(std::size_t t) const { return std::find(times.begin(), times.end(), t) != times.end(); }
};

inline Trajectory ddim_invert_trajectory(const Matrix& z0, const std::vector<std::size_t>& steps,
                                         const NoisePredictor& pred, const NoiseSchedule& sched,
                                         double eta = 0.0) {
  if (steps.empty()) throw ConfigError("ddim_invert: empty step list");
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (steps[i] == 0 || steps[i] > sched.T()) throw IndexError("ddim_invert: step out of range");
    if (i > 0 && steps[i] <= steps[i - 1])
      throw ConfigError("ddim_invert: step list must be strictly ascending");
  }
  Trajectory tr;
  tr.times.push_back(0);
  tr.states.push_back(z0);
  for (std::size_t t : steps) {
    tr.states.push_back(ddim_invert_step(tr.states.back(), tr.times.back(), t, pred, sched, eta));
    tr.times.push_back(t);
  }
  return tr;
}

inline Matrix ddim_invert(const Matrix& z0, const std::vector<std::size_t>& steps,
                          const NoisePredictor& pred, const NoiseSchedule& sched,
                          double eta = 0.0) {
  return ddim_invert_trajectory(z0, steps, pred, sched, eta).final_state();
}

/// Scalar g with ddim_step(z, t -> t_prev) == g * z, for linear-scalar predictors.
inline std::optional<double> step_gain(std::size_t t, std::size_t t_prev,
                                       const NoisePredictor& pred, const NoiseSchedule& sched,
                                       double eta) {
  const auto c = pred.gain(t);
  if (!c) return std::nullopt;
  const double a = sched.alpha_bar(t);
  const double ap = sched.alpha_bar(t_prev);
  return std::sqrt(ap) * (1.0 - std::sqrt(1.0 - a) * *c) / std::sqrt(a) +
         std::sqrt(1.0 - ap) * eta * *c;
}

/// Overall gain of ddim_sample over a descending list, when available.
inline std::optional<double> sample_gain(const std::vector<std::size_t>& steps,
                                         const NoisePredictor& pred, const NoiseSchedule& sched,
                                         double eta) {
  double g = 1.0;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const std::size_t t_prev = i + 1 < steps.size() ? steps[i + 1] : 0;
    const auto s = step_gain(steps[i], t_prev, pred, sched, eta);
    if (!s) return std::nullopt;
    g *= *s;
  }
  return g;
}

}  // namespace kgmark
