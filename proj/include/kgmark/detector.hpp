#pragma once

#include "kgmark/chi2.hpp"
#include "kgmark/spectral.hpp"

namespace kgmark {

/// Y - K* over the masked cells, one entry per Hermitian pair (the lexicographically
/// smaller cell). A self-conjugate cell carries a single real component.
struct MaskedResidual {
  std::vector<Cell> cells;
  std::vector<std::complex<double>> values;
  std::vector<bool> self_conjugate;

  /// Real components with equal variance under H0: (Re, Im) for a pair, Re/sqrt(2)
  /// for a self-conjugate cell (its real part carries the whole cell variance).
  Vector components() const {
    std::size_t k = 0;
    for (bool sc : self_conjugate) k += sc ? 1 : 2;
    Vector out(static_cast<Eigen::Index>(k));
    Eigen::Index pos = 0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (self_conjugate[i]) {
        out(pos++) = values[i].real() / std::numbers::sqrt2;
      } else {
        out(pos++) = values[i].real();
        out(pos++) = values[i].imag();
      }
    }
    return out;
  }
};

/// Masked cells reduced to pair representatives, optionally restricted to a sub-mask.
inline std::vector<Cell> masked_representatives(const MaskMatrix& mask) {
  std::vector<Cell> reps;
  for (const Cell& c : pair_representatives(mask.rows(), mask.cols()))
    if (mask.at(c)) reps.push_back(c);
  return reps;
}

inline MaskedResidual residual(const ComplexMatrix& y, const ComplexMatrix& reference,
                               const MaskMatrix& mask) {
  if (y.rows() != mask.rows() || y.cols() != mask.cols())
    throw ShapeError("residual: spectrum " + shape_str(y.rows(), y.cols()) + " vs key mask " +
                     shape_str(mask.rows(), mask.cols()));
  require_same_shape(y, reference, "residual reference");
  MaskedResidual r;
  for (const Cell& c : masked_representatives(mask)) {
    r.cells.push_back(c);
    r.values.push_back(y(c.row, c.col) - reference(c.row, c.col));
    r.self_conjugate.push_back(is_self_conjugate(c, mask.rows(), mask.cols()));
  }
  return r;
}

/// K* = F(S) for the key's signature.
inline ComplexMatrix reference_spectrum(const WatermarkKey& key) {
  return fft2(key.signature().spatial);
}

inline MaskedResidual residual(const Spectrum& y, const WatermarkKey& key) {
  return residual(y.values, reference_spectrum(key), key.mask);
}

struct Sigma2Estimate {
  double sigma2 = 1.0;
  bool fallback = false;
};

/// Per-real-component variance under H0 for an unnormalized DFT of an m x n grid of
/// unit-variance entries.
inline double theoretical_sigma2(Eigen::Index m, Eigen::Index n, double latent_variance = 1.0) {
  return 0.5 * static_cast<double>(m) * static_cast<double>(n) * latent_variance;
}

/// Mean |Y|^2/2 over off-mask cells, DC excluded; falls back to the theoretical value
/// when no such cell exists.
inline Sigma2Estimate estimate_sigma2(const ComplexMatrix& y, const MaskMatrix& mask,
                                      double fallback_sigma2) {
  require_same_shape(y, mask, "estimate_sigma2");
  double sum = 0.0;
  std::size_t count = 0;
  for (Eigen::Index i = 0; i < y.rows(); ++i)
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
      if ((i == 0 && j == 0) || mask.at(i, j)) continue;
      sum += 0.5 * std::norm(y(i, j));
      ++count;
    }
  if (count == 0) return {fallback_sigma2, true};
  return {std::max(sum / static_cast<double>(count), 1e-12), false};
}

inline Sigma2Estimate estimate_sigma2(const ComplexMatrix& y, const MaskMatrix& mask) {
  return estimate_sigma2(y, mask, theoretical_sigma2(y.rows(), y.cols()));
}

struct TestStatistic {
  double t_hat = 0.0;
  std::size_t dof = 0;
};

inline TestStatistic test_statistic(const Vector& components, double sigma2) {
  if (!(sigma2 > 0.0)) throw ConfigError("test_statistic: sigma2 must be > 0");
  return {components.squaredNorm() / sigma2, static_cast<std::size_t>(components.size())};
}

inline double noncentrality(const Vector& reference_components, double sigma2) {
  if (!(sigma2 > 0.0)) throw ConfigError("noncentrality: sigma2 must be > 0");
  return reference_components.squaredNorm() / sigma2;
}

/// Reference spectrum over the mask in the same component convention as the residual.
inline Vector reference_components(const ComplexMatrix& reference, const MaskMatrix& mask) {
  return residual(reference, ComplexMatrix::Zero(reference.rows(), reference.cols()), mask)
      .components();
}

struct LayerTest {
  std::string layer;
  double t_hat = 0.0;
  std::size_t dof = 0;
  double lambda = 0.0;
  double log_p = 0.0;
  double p_value = 1.0;
};

/// Lower-tail noncentral chi-squared test of one residual.
inline LayerTest layer_test(std::string layer, const ComplexMatrix& y, const ComplexMatrix& reference,
                            const MaskMatrix& mask, double sigma2) {
  LayerTest t;
  t.layer = std::move(layer);
  const auto stat = test_statistic(residual(y, reference, mask).components(), sigma2);
  t.t_hat = stat.t_hat;
  t.dof = stat.dof;
  t.lambda = noncentrality(reference_components(reference, mask), sigma2);
  if (t.dof == 0) return t;
  t.log_p = chi2_noncentral_log_cdf(t.t_hat, static_cast<double>(t.dof), t.lambda);
  t.p_value = std::exp(t.log_p);
  return t;
}

}  // namespace kgmark
