#pragma once

#include "kgmark/diffusion.hpp"

#include <unsupported/Eigen/FFT>

#include <numeric>

namespace kgmark {

namespace detail {

inline Eigen::FFT<double>& fft_engine() {
  thread_local Eigen::FFT<double> engine;
  return engine;
}

template <bool Forward>
ComplexMatrix fft2_impl(ComplexMatrix data) {
  auto& fft = fft_engine();
  const Eigen::Index m = data.rows(), n = data.cols();
  std::vector<std::complex<double>> in, out;
  in.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) in[static_cast<std::size_t>(j)] = data(i, j);
    if constexpr (Forward) fft.fwd(out, in); else fft.inv(out, in);
    for (Eigen::Index j = 0; j < n; ++j) data(i, j) = out[static_cast<std::size_t>(j)];
  }
  in.resize(static_cast<std::size_t>(m));
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < m; ++i) in[static_cast<std::size_t>(i)] = data(i, j);
    if constexpr (Forward) fft.fwd(out, in); else fft.inv(out, in);
    for (Eigen::Index i = 0; i < m; ++i) data(i, j) = out[static_cast<std::size_t>(i)];
  }
  return data;
}

}  // namespace detail

/// Unnormalized 2D DFT: X[k,l] = sum x[i,j] exp(-2 pi i (ik/m + jl/n)).
inline ComplexMatrix fft2(const Matrix& x) {
  if (x.rows() < 2 || x.cols() < 2) throw ShapeError("fft2: grid must be at least 2x2");
  if (!all_finite(x)) throw NumericError("fft2: non-finite input");
  return detail::fft2_impl<true>(x.cast<std::complex<double>>());
}

/// Inverse with 1/(m n) normalization, complex result.
inline ComplexMatrix ifft2_complex(const ComplexMatrix& spec) {
  if (spec.rows() < 2 || spec.cols() < 2) throw ShapeError("ifft2: spectrum must be at least 2x2");
  if (!all_finite(spec.real()) || !all_finite(spec.imag()))
    throw NumericError("ifft2: non-finite input");
  return detail::fft2_impl<false>(spec);
}

/// Real inverse; throws if the imaginary residue exceeds 1e-9 relative to the output scale.
inline Matrix ifft2(const ComplexMatrix& spec) {
  const ComplexMatrix z = ifft2_complex(spec);
  const double scale = std::max(1.0, z.real().cwiseAbs().maxCoeff());
  if (z.imag().cwiseAbs().maxCoeff() > 1e-9 * scale)
    throw NumericError("ifft2: spectrum is not Hermitian-symmetric (imaginary residue)");
  return z.real();
}

struct Cell {
  Eigen::Index row = 0;
  Eigen::Index col = 0;
  auto operator<=>(const Cell&) const = default;
};

/// Index of the conjugate partner under the DFT of a real m x n grid.
inline Cell hermitian_partner(Cell c, Eigen::Index m, Eigen::Index n) {
  return {(m - c.row) % m, (n - c.col) % n};
}

inline bool is_self_conjugate(Cell c, Eigen::Index m, Eigen::Index n) {
  return hermitian_partner(c, m, n) == c;
}

/// One representative per Hermitian pair, row-major; the representative is the
/// lexicographically smaller cell. Includes DC at the front.
inline std::vector<Cell> pair_representatives(Eigen::Index m, Eigen::Index n) {
  std::vector<Cell> reps;
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      const Cell c{i, j};
      if (!(hermitian_partner(c, m, n) < c)) reps.push_back(c);
    }
  return reps;
}

/// Binary frequency mask, always Hermitian-symmetric.
class MaskMatrix {
 public:
  using Bits = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  MaskMatrix() = default;

  explicit MaskMatrix(Bits bits) : bits_(std::move(bits)) {
    if (bits_.rows() < 1 || bits_.cols() < 1) throw ShapeError("MaskMatrix: empty mask");
    for (Eigen::Index i = 0; i < bits_.rows(); ++i)
      for (Eigen::Index j = 0; j < bits_.cols(); ++j) {
        if (bits_(i, j) > 1) throw ConfigError("MaskMatrix: entries must be 0 or 1");
        const Cell p = hermitian_partner({i, j}, bits_.rows(), bits_.cols());
        if (bits_(i, j) != bits_(p.row, p.col))
          throw ConfigError("MaskMatrix: mask is not Hermitian-symmetric at (" +
                            std::to_string(i) + "," + std::to_string(j) + ")");
      }
    count_ = static_cast<std::size_t>(bits_.cast<int>().sum());
  }

  static MaskMatrix zeros(Eigen::Index m, Eigen::Index n) { return MaskMatrix(Bits::Zero(m, n)); }
  static MaskMatrix ones(Eigen::Index m, Eigen::Index n) { return MaskMatrix(Bits::Ones(m, n)); }

  Eigen::Index rows() const { return bits_.rows(); }
  Eigen::Index cols() const { return bits_.cols(); }
  bool at(Eigen::Index i, Eigen::Index j) const { return bits_(i, j) != 0; }
  bool at(Cell c) const { return at(c.row, c.col); }
  std::size_t count() const { return count_; }
  double density() const {
    return static_cast<double>(count_) / static_cast<double>(bits_.size());
  }
  const Bits& bits() const { return bits_; }
  Matrix as_real() const { return bits_.cast<double>(); }

  std::vector<Cell> cells() const {
    std::vector<Cell> out;
    for (Eigen::Index i = 0; i < rows(); ++i)
      for (Eigen::Index j = 0; j < cols(); ++j)
        if (at(i, j)) out.push_back({i, j});
    return out;
  }

  /// Run lengths over row-major bits, alternating, starting with a (possibly empty) zero run.
  std::vector<std::size_t> to_rle() const {
    std::vector<std::size_t> runs;
    std::uint8_t current = 0;
    std::size_t len = 0;
    for (Eigen::Index k = 0; k < bits_.size(); ++k) {
      if (bits_.data()[k] == current) {
        ++len;
      } else {
        runs.push_back(len);
        current ^= 1;
        len = 1;
      }
    }
    runs.push_back(len);
    return runs;
  }

  static MaskMatrix from_rle(const std::vector<std::size_t>& runs, Eigen::Index m, Eigen::Index n) {
    if (m < 1 || n < 1) throw ParseError("mask_rle: invalid shape");
    Bits bits(m, n);
    Eigen::Index k = 0;
    std::uint8_t current = 0;
    for (std::size_t r : runs) {
      if (static_cast<Eigen::Index>(r) > bits.size() - k)
        throw ParseError("mask_rle: runs exceed m*n");
      for (std::size_t i = 0; i < r; ++i) bits.data()[k++] = current;
      current ^= 1;
    }
    if (k != bits.size()) throw ParseError("mask_rle: runs do not cover m*n");
    return MaskMatrix(std::move(bits));
  }

  bool operator==(const MaskMatrix& o) const {
    return rows() == o.rows() && cols() == o.cols() && bits_ == o.bits_;
  }

 private:
  Bits bits_;
  std::size_t count_ = 0;
};

inline double mask_density(const MaskMatrix& mask) { return mask.density(); }

/// Marks Hermitian pairs in decreasing score order (score read at the representative)
/// while fewer than ceil(density*m*n) cells are set. Ties break by representative
/// (row, col); DC always ranks last.
inline MaskMatrix mask_from_scores(const Matrix& scores, double density) {
  if (!(density > 0.0 && density < 1.0) && density != 1.0)
    throw ConfigError("mask density must lie in (0, 1]");
  const Eigen::Index m = scores.rows(), n = scores.cols();
  if (m < 2 || n < 2) throw ShapeError("mask_from_scores: grid must be at least 2x2");
  auto reps = pair_representatives(m, n);
  std::stable_sort(reps.begin(), reps.end(), [&](const Cell& a, const Cell& b) {
    const bool a_dc = a.row == 0 && a.col == 0;
    const bool b_dc = b.row == 0 && b.col == 0;
    if (a_dc != b_dc) return b_dc;
    return scores(a.row, a.col) > scores(b.row, b.col);
  });
  const auto target = static_cast<std::size_t>(
      std::ceil(density * static_cast<double>(m) * static_cast<double>(n) - 1e-9));
  MaskMatrix::Bits bits = MaskMatrix::Bits::Zero(m, n);
  std::size_t count = 0;
  for (const Cell& c : reps) {
    if (count >= target) break;
    const Cell p = hermitian_partner(c, m, n);
    bits(c.row, c.col) = 1;
    bits(p.row, p.col) = 1;
    count += p == c ? 1 : 2;
  }
  return MaskMatrix(std::move(bits));
}

inline MaskMatrix random_symmetric_mask(Eigen::Index m, Eigen::Index n, double density,
                                        std::uint64_t seed) {
  Rng rng(derive_seed(seed, "random-mask"));
  Matrix scores(m, n);
  for (Eigen::Index k = 0; k < scores.size(); ++k) scores.data()[k] = rng.uniform();
  return mask_from_scores(scores, density);
}

struct Signature {
  Matrix spatial;
  double sigma2 = 1.0;
  std::uint64_t seed = 0;
};

inline Signature gen_signature(std::uint64_t seed, double sigma2, Eigen::Index m, Eigen::Index n) {
  if (!(sigma2 > 0.0) || !std::isfinite(sigma2)) throw ConfigError("signature sigma2 must be > 0");
  if (m < 1 || n < 1) throw ShapeError("signature shape must be positive");
  Rng rng(derive_seed(seed, "signature"));
  return {rng.normal_matrix(m, n, std::sqrt(sigma2)), sigma2, seed};
}

/// Secret needed for detection. Extra fields beyond the basic tuple: the noise
/// predictor and eta used by the sampler, so inversion can be reproduced.
struct WatermarkKey {
  std::uint64_t seed = 0;
  double sigma2 = 1.0;
  MaskMatrix mask;
  NoiseSchedule schedule = NoiseSchedule::linear(75);
  std::size_t embed_steps = 75;
  std::size_t detect_steps = 75;
  double alpha_correction = 0.05;
  json predictor = {{"type", "zero"}};
  double eta = 1.0;
  std::size_t community_size = 0;  ///< partition size used at embedding; 0 = grid rows

  Eigen::Index m() const { return mask.rows(); }
  Eigen::Index n() const { return mask.cols(); }

  void validate() const {
    if (mask.rows() < 2 || mask.cols() < 2) throw ConfigError("key mask must be at least 2x2");
    if (!(sigma2 > 0.0)) throw ConfigError("key sigma2 must be > 0");
    if (embed_steps < 1 || detect_steps < 1) throw ConfigError("key steps must be >= 1");
    if (embed_steps > schedule.T() || detect_steps > schedule.T())
      throw ConfigError("key steps exceed schedule length");
    if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("key eta must lie in [0, 1]");
  }

  Signature signature() const { return gen_signature(seed, sigma2, m(), n()); }
  std::shared_ptr<NoisePredictor> make_predictor() const { return predictor_from_json(predictor); }
  std::vector<std::size_t> embed_schedule() const {
    return evenly_spaced_steps(schedule.T(), embed_steps);
  }
  std::vector<std::size_t> detect_schedule() const {
    return evenly_spaced_steps(schedule.T(), detect_steps);
  }

  json to_json() const {
    return {{"seed", seed},
            {"sigma2", sigma2},
            {"m", mask.rows()},
            {"n", mask.cols()},
            {"mask_rle", mask.to_rle()},
            {"schedule", schedule.to_json()},
            {"embed_steps", embed_steps},
            {"detect_steps", detect_steps},
            {"alpha_correction", alpha_correction},
            {"predictor", predictor},
            {"eta", eta},
            {"community_size", community_size}};
  }

  static WatermarkKey from_json(const json& j) {
    WatermarkKey k;
    try {
      k.seed = j.at("seed").get<std::uint64_t>();
      k.sigma2 = j.at("sigma2").get<double>();
      const auto m = j.at("m").get<Eigen::Index>();
      const auto n = j.at("n").get<Eigen::Index>();
      k.mask = MaskMatrix::from_rle(j.at("mask_rle").get<std::vector<std::size_t>>(), m, n);
      k.schedule = NoiseSchedule::from_json(j.at("schedule"));
      k.embed_steps = j.at("embed_steps").get<std::size_t>();
      k.detect_steps = j.at("detect_steps").get<std::size_t>();
      k.alpha_correction = j.at("alpha_correction").get<double>();
      k.predictor = j.value("predictor", json{{"type", "zero"}});
      k.eta = j.value("eta", 1.0);
      k.community_size = j.value("community_size", std::size_t{0});
    } catch (const json::exception& e) {
      throw ParseError(std::string("watermark key: ") + e.what());
    } catch (const ConfigError& e) {
      throw ParseError(std::string("watermark key: ") + e.what());
    }
    k.validate();
    return k;
  }
};

/// A key file holds one key object or {"keys": [...]}.
inline std::vector<WatermarkKey> key_ring_from_json(const json& j) {
  std::vector<WatermarkKey> ring;
  if (j.is_object() && j.contains("keys")) {
    if (!j.at("keys").is_array()) throw ParseError("key ring: 'keys' must be an array");
    for (const auto& k : j.at("keys")) ring.push_back(WatermarkKey::from_json(k));
  } else {
    ring.push_back(WatermarkKey::from_json(j));
  }
  if (ring.empty()) throw ParseError("key ring is empty");
  return ring;
}

inline json key_ring_to_json(const std::vector<WatermarkKey>& ring) {
  json keys = json::array();
  for (const auto& k : ring) keys.push_back(k.to_json());
  return {{"keys", keys}};
}

/// Real inverse of F(Z)(1-M) + F(S)M for a real-valued Hermitian-symmetric weight M.
inline Matrix spectral_blend(const Matrix& z, const Matrix& s, const Matrix& weight) {
  require_same_shape(z, s, "spectral_blend");
  require_same_shape(z, weight, "spectral_blend mask");
  const ComplexMatrix fz = fft2(z);
  const ComplexMatrix fs = fft2(s);
  const ComplexMatrix delta =
      fz.array() * (1.0 - weight.array()).cast<std::complex<double>>() +
      fs.array() * weight.array().cast<std::complex<double>>();
  return ifft2(delta);
}

inline Matrix embed_watermark(const Matrix& z, const Signature& sig, const MaskMatrix& mask) {
  require_same_shape(z, sig.spatial, "embed_watermark");
  require_same_shape(z, mask, "embed_watermark mask");
  return spectral_blend(z, sig.spatial, mask.as_real());
}

struct Spectrum {
  ComplexMatrix values;
  std::string provenance;
};

inline Spectrum extract_spectrum(const Matrix& z, std::string provenance = {}) {
  return {fft2(z), std::move(provenance)};
}

}  // namespace kgmark
