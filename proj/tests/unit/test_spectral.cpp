#include "kgmark/spectral.hpp"

#include <gtest/gtest.h>

using namespace kgmark;

namespace {

// Direct O(m^2 n^2) DFT as an independent oracle.
ComplexMatrix naive_dft(const Matrix& x) {
  const auto m = x.rows(), n = x.cols();
  ComplexMatrix out(m, n);
  for (Eigen::Index k = 0; k < m; ++k)
    for (Eigen::Index l = 0; l < n; ++l) {
      std::complex<double> acc = 0.0;
      for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < n; ++j) {
          const double ang = -2.0 * std::numbers::pi *
                             (static_cast<double>(i * k) / m + static_cast<double>(j * l) / n);
          acc += x(i, j) * std::complex<double>(std::cos(ang), std::sin(ang));
        }
      out(k, l) = acc;
    }
  return out;
}

double max_abs(const ComplexMatrix& a) { return a.cwiseAbs().maxCoeff(); }

}  // namespace

TEST(Fft2, ConstantGridHasOnlyDc) {
  const auto spec = fft2(Matrix::Constant(6, 8, 2.5));
  EXPECT_NEAR(spec(0, 0).real(), 2.5 * 48, 1e-10);
  ComplexMatrix rest = spec;
  rest(0, 0) = 0.0;
  EXPECT_LT(max_abs(rest), 1e-10);
}

TEST(Fft2, ImpulseGivesFlatSpectrum) {
  Matrix x = Matrix::Zero(5, 7);
  x(0, 0) = 1.0;
  const auto spec = fft2(x);
  EXPECT_LT(max_abs(spec.array() - std::complex<double>(1.0, 0.0)), 1e-12);
}

TEST(Fft2, MatchesNaiveDftRoundTripAndParseval) {
  Rng rng(1);
  for (auto [m, n] : std::vector<std::pair<int, int>>{{4, 4}, {7, 5}, {12, 10}, {3, 16}}) {
    const Matrix x = rng.normal_matrix(m, n);
    const auto spec = fft2(x);
    EXPECT_LT(max_abs(spec - naive_dft(x)), 1e-9);
    EXPECT_LT((ifft2(spec) - x).cwiseAbs().maxCoeff(), 1e-10);
    const double ratio = spec.cwiseAbs2().sum() / (m * n * x.squaredNorm());
    EXPECT_NEAR(ratio, 1.0, 1e-8);
  }
  EXPECT_THROW(fft2(Matrix::Zero(1, 4)), ShapeError);
  Matrix bad = Matrix::Zero(3, 3);
  bad(1, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(fft2(bad), NumericError);
}

TEST(Fft2, RealInputIsHermitian) {
  Rng rng(2);
  const Matrix x = rng.normal_matrix(6, 9);
  const auto spec = fft2(x);
  for (Eigen::Index i = 0; i < 6; ++i)
    for (Eigen::Index j = 0; j < 9; ++j) {
      const Cell p = hermitian_partner({i, j}, 6, 9);
      EXPECT_LT(std::abs(spec(i, j) - std::conj(spec(p.row, p.col))), 1e-10);
    }
}

TEST(MaskMatrix, DensityAndSymmetryCheck) {
  MaskMatrix::Bits bits = MaskMatrix::Bits::Zero(3, 4);
  bits(0, 2) = 1;               // self-conjugate
  bits(1, 1) = bits(2, 3) = 1;  // conjugate pair
  const MaskMatrix mask(bits);
  EXPECT_EQ(mask.count(), 3u);
  EXPECT_DOUBLE_EQ(mask_density(mask), 0.25);
  EXPECT_DOUBLE_EQ(MaskMatrix::ones(5, 5).density(), 1.0);
  bits(2, 3) = 0;
  EXPECT_THROW(MaskMatrix{bits}, ConfigError);
}

TEST(MaskMatrix, RleRoundTrip) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto mask = random_symmetric_mask(9, 12, 0.1 + 0.04 * static_cast<double>(seed), seed);
    const auto rle = mask.to_rle();
    EXPECT_EQ(std::accumulate(rle.begin(), rle.end(), std::size_t{0}), 108u);
    EXPECT_EQ(MaskMatrix::from_rle(rle, 9, 12), mask);
  }
  EXPECT_EQ(MaskMatrix::ones(2, 2).to_rle(), (std::vector<std::size_t>{0, 4}));
  EXPECT_THROW(MaskMatrix::from_rle({3}, 2, 2), ParseError);
}

TEST(MaskMatrix, RandomMaskDensityWithinOnePair) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto mask = random_symmetric_mask(64, 64, 0.015, seed);
    const double target = 0.015 * 64 * 64;
    EXPECT_GE(static_cast<double>(mask.count()), target);
    EXPECT_LE(static_cast<double>(mask.count()), target + 2.0);
    EXPECT_FALSE(mask.at(0, 0));
  }
  EXPECT_EQ(mask_from_scores(Matrix::Zero(4, 4), 1.0).count(), 16u);
}

TEST(Signature, DeterministicAndCalibrated) {
  const auto a = gen_signature(42, 1.0, 64, 64);
  const auto b = gen_signature(42, 1.0, 64, 64);
  EXPECT_TRUE(a.spatial == b.spatial);
  const double mean = a.spatial.mean();
  const double var = (a.spatial.array() - mean).square().sum() / (4096 - 1);
  EXPECT_GE(var, 0.9);
  EXPECT_LE(var, 1.1);
  EXPECT_THROW(gen_signature(1, 0.0, 4, 4), ConfigError);
  const auto c = gen_signature(42, 4.0, 64, 64);
  EXPECT_LT((c.spatial - 2.0 * a.spatial).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(EmbedWatermark, FullAndEmptyMasks) {
  Rng rng(3);
  const Matrix z = rng.normal_matrix(8, 10);
  const auto sig = gen_signature(7, 1.0, 8, 10);
  EXPECT_LT((embed_watermark(z, sig, MaskMatrix::ones(8, 10)) - sig.spatial).cwiseAbs().maxCoeff(),
            1e-10);
  EXPECT_LT((embed_watermark(z, sig, MaskMatrix::zeros(8, 10)) - z).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_THROW(embed_watermark(z, gen_signature(7, 1.0, 8, 9), MaskMatrix::zeros(8, 10)),
               ShapeError);
}

TEST(EmbedWatermark, SpectralPartitionIdempotenceEnergy) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index m = 8 + trial % 9, n = 6 + trial % 11;
    const Matrix z = rng.normal_matrix(m, n);
    const auto sig = gen_signature(static_cast<std::uint64_t>(trial), 1.0, m, n);
    const auto mask = random_symmetric_mask(m, n, 0.05 + 0.3 * rng.uniform(), trial);
    const Matrix zw = embed_watermark(z, sig, mask);
    const auto fw = extract_spectrum(zw).values;
    const auto fz = fft2(z), fs = fft2(sig.spatial);
    double masked_energy = 0.0;
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0; j < n; ++j) {
        const auto expect = mask.at(i, j) ? fs(i, j) : fz(i, j);
        EXPECT_LT(std::abs(fw(i, j) - expect), 1e-9);
        if (mask.at(i, j)) masked_energy += std::norm(fs(i, j) - fz(i, j));
      }
    EXPECT_LT((embed_watermark(zw, sig, mask) - zw).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_NEAR((zw - z).squaredNorm(), masked_energy / static_cast<double>(m * n),
                1e-6 * std::max(1.0, masked_energy / static_cast<double>(m * n)));
  }
}

TEST(EmbedWatermark, OperatingDensity) {
  Rng rng(5);
  const Matrix z = rng.normal_matrix(64, 64);
  const auto sig = gen_signature(9, 1.0, 64, 64);
  const auto mask = random_symmetric_mask(64, 64, 0.015, 9);
  const auto fw = fft2(embed_watermark(z, sig, mask));
  const auto fs = fft2(sig.spatial);
  for (const Cell& c : mask.cells()) EXPECT_LT(std::abs(fw(c.row, c.col) - fs(c.row, c.col)), 1e-9);
}

TEST(ExtractSpectrum, AliasOfFft) {
  Rng rng(6);
  const Matrix z = rng.normal_matrix(5, 5);
  EXPECT_TRUE(extract_spectrum(z, "x").values == fft2(z));
  EXPECT_LT(max_abs(extract_spectrum(Matrix::Zero(4, 4)).values), 1e-15);
}

TEST(WatermarkKey, JsonRoundTrip) {
  WatermarkKey k;
  k.seed = 0xfedcba9876543210ULL;
  k.sigma2 = 1.5;
  k.mask = random_symmetric_mask(10, 8, 0.1, 3);
  k.embed_steps = 50;
  k.detect_steps = 25;
  k.predictor = LinearPredictor::constant(75, 0.2).to_json();
  const auto back = WatermarkKey::from_json(json::parse(k.to_json().dump()));
  EXPECT_EQ(back.seed, k.seed);
  EXPECT_EQ(back.mask, k.mask);
  EXPECT_EQ(back.embed_steps, 50u);
  EXPECT_EQ(back.detect_steps, 25u);
  EXPECT_EQ(back.schedule.alphas(), k.schedule.alphas());
  EXPECT_EQ(back.predictor, k.predictor);
  EXPECT_THROW(WatermarkKey::from_json(json::parse(R"({"seed": 1})")), ParseError);
  const auto ring = key_ring_from_json(key_ring_to_json({k, back}));
  EXPECT_EQ(ring.size(), 2u);
}
