#pragma once

#include "kgmark/watermark.hpp"

#include <functional>

namespace kgmark {

/// One logit per Hermitian pair; expand() writes it to both cells of the pair.
class MaskLogits {
 public:
  MaskLogits(Eigen::Index m, Eigen::Index n, double init = 0.0)
      : m_(m), n_(n), pairs_(pair_representatives(m, n)), theta_(Vector::Constant(static_cast<Eigen::Index>(pairs_.size()), init)) {}

  Eigen::Index rows() const { return m_; }
  Eigen::Index cols() const { return n_; }
  const std::vector<Cell>& pairs() const { return pairs_; }
  Vector& theta() { return theta_; }
  const Vector& theta() const { return theta_; }

  /// Full m x n logits; tied cells equal by construction.
  Matrix expand() const { return expand(theta_); }

  Matrix expand(const Vector& values) const {
    Matrix out(m_, n_);
    for (std::size_t k = 0; k < pairs_.size(); ++k) {
      const Cell c = pairs_[k], p = hermitian_partner(c, m_, n_);
      out(c.row, c.col) = out(p.row, p.col) = values(static_cast<Eigen::Index>(k));
    }
    return out;
  }

  /// Per-pair sum of a per-cell field (the chain rule through the tie).
  Vector reduce(const Matrix& per_cell) const {
    Vector out(static_cast<Eigen::Index>(pairs_.size()));
    for (std::size_t k = 0; k < pairs_.size(); ++k) {
      const Cell c = pairs_[k], p = hermitian_partner(c, m_, n_);
      out(static_cast<Eigen::Index>(k)) = per_cell(c.row, c.col) + (p == c ? 0.0 : per_cell(p.row, p.col));
    }
    return out;
  }

 private:
  Eigen::Index m_, n_;
  std::vector<Cell> pairs_;
  Vector theta_;
};

inline Matrix sigmoid(const Matrix& x) {
  return x.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

/// ceil(density*m*n) largest sigmoid values by pairs; ties by (row, col).
inline MaskMatrix threshold_mask(const Matrix& logits, double density) {
  if (!(density > 0.0 && density < 1.0)) throw ConfigError("threshold density must lie in (0, 1)");
  return mask_from_scores(sigmoid(logits), density);
}

/// Same budget, split between the row-frequency-0 band and the rest as in the pipeline.
inline MaskMatrix threshold_layered_mask(const Matrix& logits, double density) {
  return layered_mask_from_scores(sigmoid(logits), density);
}

enum class LawmmObjective { presample, postsample };
enum class GradientMode { analytic, finite_difference };

struct LawmmConfig {
  double target_density = 0.015;
  double density_penalty = 10.0;
  double alpha_correction = 0.05;
  std::vector<std::size_t> checkpoints;  ///< k_j; empty = 5 evenly spaced
  std::size_t iterations = 100;
  double lr = 50.0;
  LawmmObjective objective = LawmmObjective::postsample;
  GradientMode gradient = GradientMode::analytic;
  double fd_epsilon = 1e-6;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(target_density > 0.0 && target_density < 1.0))
      throw ConfigError("lawmm target density must lie in (0, 1)");
    if (iterations < 1) throw ConfigError("lawmm iterations must be >= 1");
    if (!(lr >= 0.0)) throw ConfigError("lawmm lr must be >= 0");
    if (!(density_penalty >= 0.0)) throw ConfigError("lawmm density penalty must be >= 0");
    if (!(fd_epsilon > 0.0)) throw ConfigError("lawmm fd epsilon must be > 0");
  }
};

/// k_j = round(j * N / (count + 1)), j = 1..count, restricted to 0 < k < N.
inline std::vector<std::size_t> default_checkpoints(std::size_t n_steps, std::size_t count = 5) {
  std::vector<std::size_t> ks;
  for (std::size_t j = 1; j <= count; ++j) {
    const auto k = static_cast<std::size_t>(std::llround(static_cast<double>(j * n_steps) / static_cast<double>(count + 1)));
    if (k > 0 && k < n_steps && (ks.empty() || k > ks.back())) ks.push_back(k);
  }
  if (ks.empty()) throw ConfigError("lawmm: schedule too short for checkpoints");
  return ks;
}

/// Inverted latent with its trajectory plus the sampler that produced it.
struct LawmmSample {
  Trajectory trajectory;
  std::shared_ptr<NoisePredictor> predictor;
  NoiseSchedule schedule = NoiseSchedule::linear(1);
  double eta = 1.0;

  const Matrix& z_t() const { return trajectory.final_state(); }
  std::size_t n_steps() const { return trajectory.times.size() - 1; }

  /// Z^INV at T - k: the trajectory state k moves below the top.
  const Matrix& inverted_state(std::size_t k) const {
    if (k == 0 || k >= n_steps())
      throw IndexError("lawmm: no trajectory state for k = " + std::to_string(k));
    return trajectory.states[n_steps() - k];
  }

  /// f_DDIM^k: k sampling moves from the top of the trajectory's step list.
  Matrix sample_down(const Matrix& z, std::size_t k) const {
    if (k == 0 || k >= n_steps()) throw IndexError("lawmm: bad sampling depth " + std::to_string(k));
    Matrix out = z;
    const std::size_t top = n_steps();
    for (std::size_t i = 0; i < k; ++i)
      out = ddim_step(out, trajectory.times[top - i], trajectory.times[top - i - 1], *predictor, schedule, eta);
    return out;
  }

  /// Scalar gain of sample_down when the predictor is linear in its input.
  std::optional<double> sample_gain_down(std::size_t k) const {
    double g = 1.0;
    const std::size_t top = n_steps();
    for (std::size_t i = 0; i < k; ++i) {
      const auto s = step_gain(trajectory.times[top - i], trajectory.times[top - i - 1], *predictor, schedule, eta);
      if (!s) return std::nullopt;
      g *= *s;
    }
    return g;
  }
};

inline LawmmSample make_lawmm_sample(const Matrix& z0, const WatermarkKey& key) {
  LawmmSample s;
  s.predictor = key.make_predictor();
  s.schedule = key.schedule;
  s.eta = key.eta;
  s.trajectory = ddim_invert_trajectory(z0, key.embed_schedule(), *s.predictor, key.schedule, key.eta);
  return s;
}

/// Convex spectral blend F^-1((1 - w) F(Z) + w F(S)); w must be Hermitian-symmetric.
inline Matrix soft_blend(const Matrix& z, const Matrix& s, const Matrix& w) {
  return spectral_blend(z, s, w);
}

namespace detail {

inline void check_checkpoints(const LawmmSample& s, const std::vector<std::size_t>& ks) {
  if (ks.empty()) throw ConfigError("lawmm: empty checkpoint list");
  for (std::size_t k : ks) (void)s.inverted_state(k);
}

inline double mn(const Matrix& m) { return static_cast<double>(m.rows()) * static_cast<double>(m.cols()); }

}  // namespace detail

/// Sum_j || Z^INV_{T-k_j} - f_DDIM^{k_j}(f_w(Z_T, S, w)) ||^2
inline double lawmm_loss_presample(const LawmmSample& s, const Signature& sig, const Matrix& w,
                                   const std::vector<std::size_t>& ks) {
  detail::check_checkpoints(s, ks);
  const Matrix zw = soft_blend(s.z_t(), sig.spatial, w);
  double loss = 0.0;
  for (std::size_t k : ks) loss += (s.inverted_state(k) - s.sample_down(zw, k)).squaredNorm();
  return loss;
}

/// Sum_j || Z^INV_{T-k_j} - [f_w(f_DDIM^{k_j}(Z_T), S, w) + alpha S.w] ||^2
inline double lawmm_loss_postsample(const LawmmSample& s, const Signature& sig, const Matrix& w,
                                    const std::vector<std::size_t>& ks, double alpha) {
  detail::check_checkpoints(s, ks);
  double loss = 0.0;
  for (std::size_t k : ks) {
    const Matrix zk = s.sample_down(s.z_t(), k);
    const Matrix pred = soft_blend(zk, sig.spatial, w) + alpha * sig.spatial.cwiseProduct(w);
    loss += (s.inverted_state(k) - pred).squaredNorm();
  }
  return loss;
}

/// Per-cell gradient of the loss w.r.t. w (pair sums come from MaskLogits::reduce).
/// Postsample is quadratic in w for any predictor; presample needs a linear sampler.
inline Matrix lawmm_loss_gradient(const LawmmSample& s, const Signature& sig, const Matrix& w,
                                  const std::vector<std::size_t>& ks, LawmmObjective objective,
                                  double alpha) {
  detail::check_checkpoints(s, ks);
  const double size = detail::mn(w);
  const ComplexMatrix fs = fft2(sig.spatial);
  Matrix grad = Matrix::Zero(w.rows(), w.cols());
  for (std::size_t k : ks) {
    if (objective == LawmmObjective::postsample) {
      const Matrix zk = s.sample_down(s.z_t(), k);
      const ComplexMatrix d = fs - fft2(zk);
      const Matrix r = s.inverted_state(k) - soft_blend(zk, sig.spatial, w) - alpha * sig.spatial.cwiseProduct(w);
      const ComplexMatrix fr = fft2(r);
      grad.array() -= 2.0 * ((fr.conjugate().array() * d.array()).real() / size +
                             alpha * sig.spatial.array() * r.array());
    } else {
      const auto g = s.sample_gain_down(k);
      if (!g) throw ConfigError("lawmm: analytic presample gradient needs a linear predictor");
      const ComplexMatrix d = fs - fft2(s.z_t());
      const Matrix r = s.inverted_state(k) - *g * soft_blend(s.z_t(), sig.spatial, w);
      const ComplexMatrix fr = fft2(r);
      grad.array() -= 2.0 * *g * (fr.conjugate().array() * d.array()).real() / size;
    }
  }
  return grad;
}

struct TraceRow {
  std::size_t iteration = 0;
  double loss = 0.0;
  double density = 0.0;
  double gradient_norm = 0.0;
};

struct LawmmResult {
  MaskMatrix mask;
  Matrix logits;
  std::vector<TraceRow> trace;
  double initial_objective = 0.0;
  double final_objective = 0.0;
};

/// Mean loss over samples / (m n |k|) + penalty (mean(w) - rho*)^2, as a function of the pair logits.
class LawmmProblem {
 public:
  LawmmProblem(std::vector<LawmmSample> samples, Signature sig, LawmmConfig cfg)
      : samples_(std::move(samples)), sig_(std::move(sig)), cfg_(std::move(cfg)) {
    cfg_.validate();
    if (samples_.empty()) throw ConfigError("lawmm: at least one sample required");
    for (const auto& s : samples_) require_same_shape(s.z_t(), sig_.spatial, "lawmm sample");
    if (cfg_.checkpoints.empty()) cfg_.checkpoints = default_checkpoints(samples_.front().n_steps());
    for (const auto& s : samples_) detail::check_checkpoints(s, cfg_.checkpoints);
    if (cfg_.objective == LawmmObjective::postsample) {
      // the sampled states do not depend on the mask
      const ComplexMatrix fs = fft2(sig_.spatial);
      for (const auto& s : samples_) {
        sampled_.emplace_back();
        diff_.emplace_back();
        for (std::size_t k : cfg_.checkpoints) {
          sampled_.back().push_back(s.sample_down(s.z_t(), k));
          diff_.back().push_back(fs - fft2(sampled_.back().back()));
        }
      }
    }
  }

  const LawmmConfig& config() const { return cfg_; }
  Eigen::Index rows() const { return sig_.spatial.rows(); }
  Eigen::Index cols() const { return sig_.spatial.cols(); }

  double loss(const Matrix& w) const {
    double total = 0.0;
    for (std::size_t i = 0; i < samples_.size(); ++i) {
      if (cfg_.objective == LawmmObjective::presample) {
        total += lawmm_loss_presample(samples_[i], sig_, w, cfg_.checkpoints);
        continue;
      }
      for (std::size_t j = 0; j < cfg_.checkpoints.size(); ++j)
        total += post_residual(i, j, w).squaredNorm();
    }
    return total / (static_cast<double>(samples_.size()) * norm());
  }

  double objective(const MaskLogits& logits, const Vector& theta) const {
    const Matrix w = sigmoid(logits.expand(theta));
    const double gap = w.mean() - cfg_.target_density;
    return loss(w) + cfg_.density_penalty * gap * gap;
  }

  Vector gradient(const MaskLogits& logits, const Vector& theta) const {
    if (cfg_.gradient == GradientMode::finite_difference) return fd_gradient(logits, theta);
    const Matrix w = sigmoid(logits.expand(theta));
    Matrix dw = Matrix::Zero(w.rows(), w.cols());
    for (std::size_t i = 0; i < samples_.size(); ++i) {
      if (cfg_.objective == LawmmObjective::presample) {
        dw += lawmm_loss_gradient(samples_[i], sig_, w, cfg_.checkpoints, cfg_.objective, cfg_.alpha_correction);
        continue;
      }
      for (std::size_t j = 0; j < cfg_.checkpoints.size(); ++j) {
        const Matrix r = post_residual(i, j, w);
        const ComplexMatrix fr = fft2(r);
        dw.array() -= 2.0 * ((fr.conjugate().array() * diff_[i][j].array()).real() / detail::mn(w) +
                             cfg_.alpha_correction * sig_.spatial.array() * r.array());
      }
    }
    dw /= static_cast<double>(samples_.size()) * norm();
    dw.array() += 2.0 * cfg_.density_penalty * (w.mean() - cfg_.target_density) / static_cast<double>(w.size());
    const Matrix dtheta = (dw.array() * w.array() * (1.0 - w.array())).matrix();
    return logits.reduce(dtheta);
  }

  Vector fd_gradient(const MaskLogits& logits, const Vector& theta) const {
    Vector g(theta.size());
    Vector probe = theta;
    for (Eigen::Index k = 0; k < theta.size(); ++k) {
      probe(k) = theta(k) + cfg_.fd_epsilon;
      const double up = objective(logits, probe);
      probe(k) = theta(k) - cfg_.fd_epsilon;
      const double down = objective(logits, probe);
      probe(k) = theta(k);
      g(k) = (up - down) / (2.0 * cfg_.fd_epsilon);
    }
    return g;
  }

 private:
  double norm() const {
    return static_cast<double>(rows()) * static_cast<double>(cols()) *
           static_cast<double>(cfg_.checkpoints.size());
  }

  /// Z^INV_{T-k} - [Z_k + F^-1(w D) + alpha S.w] with Z_k = f_DDIM^k(Z_T), D = F(S) - F(Z_k).
  Matrix post_residual(std::size_t i, std::size_t j, const Matrix& w) const {
    const ComplexMatrix blend = w.cast<std::complex<double>>().cwiseProduct(diff_[i][j]);
    return samples_[i].inverted_state(cfg_.checkpoints[j]) - sampled_[i][j] - ifft2(blend) -
           cfg_.alpha_correction * sig_.spatial.cwiseProduct(w);
  }

  std::vector<LawmmSample> samples_;
  Signature sig_;
  LawmmConfig cfg_;
  std::vector<std::vector<Matrix>> sampled_;
  std::vector<std::vector<ComplexMatrix>> diff_;
};

inline MaskLogits initial_logits(Eigen::Index m, Eigen::Index n, const LawmmConfig& cfg) {
  const double rho = cfg.target_density;
  MaskLogits logits(m, n, std::log(rho / (1.0 - rho)));
  Rng rng(derive_seed(cfg.seed, "lawmm-init"));
  for (Eigen::Index k = 0; k < logits.theta().size(); ++k) logits.theta()(k) += 0.01 * rng.normal();
  return logits;
}

/// Gradient descent with backtracking: a step is accepted only if the objective does not
/// increase, so the trace is non-increasing. The mask is binarized with `binarize`.
inline LawmmResult optimize_mask(const LawmmProblem& problem,
                                 const std::function<MaskMatrix(const Matrix&, double)>& binarize = threshold_mask) {
  const auto& cfg = problem.config();
  MaskLogits logits = initial_logits(problem.rows(), problem.cols(), cfg);
  LawmmResult res;
  double obj = problem.objective(logits, logits.theta());
  if (!std::isfinite(obj)) throw OptimizationError("lawmm: non-finite objective at iteration 0");
  res.initial_objective = obj;
  double lr = cfg.lr;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const Vector g = problem.gradient(logits, logits.theta());
    if (!all_finite(g)) throw OptimizationError("lawmm: non-finite gradient at iteration " + std::to_string(it));
    bool accepted = false;
    for (int tries = 0; tries < 40 && !accepted; ++tries) {
      const Vector cand = logits.theta() - lr * g;
      const double next = problem.objective(logits, cand);
      if (!std::isfinite(next))
        throw OptimizationError("lawmm: objective became non-finite at iteration " + std::to_string(it));
      if (next <= obj) {
        logits.theta() = cand;
        obj = next;
        accepted = true;
        lr *= 1.2;
      } else {
        lr *= 0.5;
      }
    }
    const Matrix w = sigmoid(logits.expand());
    res.trace.push_back({it, obj, w.mean(), g.norm()});
    if (!accepted) break;
  }
  res.final_objective = obj;
  res.logits = logits.expand();
  res.mask = binarize(res.logits, cfg.target_density);
  return res;
}

inline void write_trace_csv(const std::string& path, const std::vector<TraceRow>& trace) {
  std::ostringstream out;
  out << "iteration,loss,density,gradient_norm\n";
  out.precision(17);
  for (const auto& r : trace) out << r.iteration << ',' << r.loss << ',' << r.density << ',' << r.gradient_norm << '\n';
  write_file(path, out.str());
}

}  // namespace kgmark
