#include "kgmark/lawmm.hpp"

#include <gtest/gtest.h>

using namespace kgmark;

namespace {

WatermarkKey zero_key(Eigen::Index m, Eigen::Index n, std::size_t T = 20, std::uint64_t seed = 1) {
  KeyRingConfig kc;
  kc.seed = seed;
  kc.predictor = "zero";
  kc.schedule = NoiseSchedule::linear(T);
  kc.embed_steps = T;
  kc.detect_steps = T;
  kc.density = 0.1;
  return make_key(kc, m, n);
}

/// Naive O((mn)^2) inverse DFT of w .* (F(s) - F(z)), real part; independent of the FFT backend.
Matrix naive_blend_delta(const Matrix& z, const Matrix& s, const Matrix& w) {
  const Eigen::Index m = z.rows(), n = z.cols();
  const double two_pi = 2.0 * std::numbers::pi;
  ComplexMatrix d(m, n);
  for (Eigen::Index u = 0; u < m; ++u)
    for (Eigen::Index v = 0; v < n; ++v) {
      std::complex<double> acc = 0.0;
      for (Eigen::Index x = 0; x < m; ++x)
        for (Eigen::Index y = 0; y < n; ++y)
          acc += (s(x, y) - z(x, y)) * std::polar(1.0, -two_pi * (double(u * x) / m + double(v * y) / n));
      d(u, v) = w(u, v) * acc;
    }
  Matrix out(m, n);
  for (Eigen::Index x = 0; x < m; ++x)
    for (Eigen::Index y = 0; y < n; ++y) {
      std::complex<double> acc = 0.0;
      for (Eigen::Index u = 0; u < m; ++u)
        for (Eigen::Index v = 0; v < n; ++v)
          acc += d(u, v) * std::polar(1.0, two_pi * (double(u * x) / m + double(v * y) / n));
      out(x, y) = acc.real() / double(m * n);
    }
  return out;
}

/// Zero predictor: each DDIM move scales by sqrt(abar_to / abar_from), so k moves down from
/// the top of the step list scale by sqrt(abar(times[N-k]) / abar(times[N])).
double zero_gain(const LawmmSample& s, std::size_t k) {
  const auto& t = s.trajectory.times;
  const std::size_t N = t.size() - 1;
  return std::sqrt(s.schedule.alpha_bar(t[N - k]) / s.schedule.alpha_bar(t[N]));
}

Matrix symmetric_soft_mask(Eigen::Index m, Eigen::Index n, std::uint64_t seed) {
  MaskLogits l(m, n);
  Rng rng(seed);
  for (Eigen::Index k = 0; k < l.theta().size(); ++k) l.theta()(k) = rng.uniform();
  return l.expand();
}

}  // namespace

TEST(MaskLogits, TiedEntriesEqualAndReduceSumsPairs) {
  MaskLogits l(6, 5);
  Rng rng(1);
  for (Eigen::Index k = 0; k < l.theta().size(); ++k) l.theta()(k) = rng.normal();
  const Matrix full = l.expand();
  for (Eigen::Index i = 0; i < 6; ++i)
    for (Eigen::Index j = 0; j < 5; ++j) {
      const Cell p = hermitian_partner({i, j}, 6, 5);
      EXPECT_EQ(full(i, j), full(p.row, p.col));
    }
  const Vector r = l.reduce(Matrix::Ones(6, 5));
  for (std::size_t k = 0; k < l.pairs().size(); ++k)
    EXPECT_EQ(r(static_cast<Eigen::Index>(k)), is_self_conjugate(l.pairs()[k], 6, 5) ? 1.0 : 2.0);
  EXPECT_NEAR(r.sum(), 30.0, 0.0);
}

TEST(ThresholdMask, PairGranularityAt64) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Matrix logits = Rng(s).normal_matrix(64, 64);
    MaskLogits tied(64, 64);
    for (Eigen::Index k = 0; k < tied.theta().size(); ++k) tied.theta()(k) = logits.data()[k];
    const auto mask = threshold_mask(tied.expand(), 0.015);
    EXPECT_TRUE(mask.count() == 62 || mask.count() == 64) << mask.count();
  }
}

TEST(ThresholdMask, UniformLogitsTieBreakLexicographic) {
  const auto mask = threshold_mask(Matrix::Zero(8, 8), 0.1);  // ceil(6.4) = 7 cells
  const auto again = threshold_mask(Matrix::Zero(8, 8), 0.1);
  EXPECT_EQ(mask, again);
  // first pair representatives in (row, col) order after DC: (0,1)+(0,7), (0,2)+(0,6), (0,3)+(0,5), (0,4)
  EXPECT_TRUE(mask.at(0, 1) && mask.at(0, 7) && mask.at(0, 2) && mask.at(0, 6));
  EXPECT_TRUE(mask.at(0, 3) && mask.at(0, 5) && mask.at(0, 4));
  EXPECT_FALSE(mask.at(0, 0));
  EXPECT_EQ(mask.count(), 7u);
}

TEST(ThresholdMask, NearOneIsAllOnesAndErrors) {
  const auto mask = threshold_mask(Rng(3).normal_matrix(6, 6), 1.0 - 1e-9);
  EXPECT_EQ(mask.count(), 36u);
  EXPECT_THROW(threshold_mask(Matrix::Zero(4, 4), 0.0), ConfigError);
  EXPECT_THROW(threshold_mask(Matrix::Zero(4, 4), 1.0), ConfigError);
}

TEST(ThresholdMask, SymmetricForArbitraryLogits) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    // untied logits; the pair score is read at the representative, output must still be symmetric
    EXPECT_NO_THROW(threshold_mask(Rng(s).normal_matrix(9, 7), 0.2));
    EXPECT_NO_THROW(threshold_layered_mask(Rng(s).normal_matrix(9, 7), 0.2));
  }
}

TEST(LawmmLoss, ZeroMaskIsPureSamplingLossAndZeroForZeroPredictor) {
  const auto key = zero_key(6, 5);
  const Matrix z0 = Rng(1).normal_matrix(6, 5);
  const auto s = make_lawmm_sample(z0, key);
  const auto ks = default_checkpoints(s.n_steps());
  const Matrix w0 = Matrix::Zero(6, 5);
  EXPECT_LT(lawmm_loss_presample(s, key.signature(), w0, ks), 1e-20);
  EXPECT_LT(lawmm_loss_postsample(s, key.signature(), w0, ks, 0.3), 1e-20);
  // replacement by a copy of Z_T is the identity
  const Signature copy{s.z_t(), 1.0, 0};
  EXPECT_NEAR(lawmm_loss_presample(s, copy, Matrix::Ones(6, 5), ks), lawmm_loss_presample(s, copy, w0, ks), 1e-10);
}

TEST(LawmmLoss, AlphaZeroZeroMaskPostEqualsPre) {
  KeyRingConfig kc;
  kc.schedule = NoiseSchedule::linear(20);
  kc.embed_steps = 20;
  kc.detect_steps = 20;
  const auto key = make_key(kc, 8, 6);  // linear predictor
  const auto s = make_lawmm_sample(Rng(2).normal_matrix(8, 6), key);
  const auto ks = default_checkpoints(s.n_steps());
  const Matrix w0 = Matrix::Zero(8, 6);
  const double pre = lawmm_loss_presample(s, key.signature(), w0, ks);
  EXPECT_GT(pre, 0.0);
  EXPECT_NEAR(lawmm_loss_postsample(s, key.signature(), w0, ks, 0.0), pre, 1e-12 * pre);
  EXPECT_NEAR(lawmm_loss_postsample(s, key.signature(), w0, ks, 0.7), pre, 1e-12 * pre);
}

TEST(LawmmLoss, PresampleMatchesClosedFormUnderZeroPredictor) {
  const Eigen::Index m = 5, n = 4;
  const auto key = zero_key(m, n);
  const auto sig = key.signature();
  const auto s = make_lawmm_sample(Rng(3).normal_matrix(m, n), key);
  const std::vector<std::size_t> ks{3, 9, 15};
  for (std::uint64_t t = 0; t < 5; ++t) {
    const Matrix w = symmetric_soft_mask(m, n, t);
    const Matrix blended = s.z_t() + naive_blend_delta(s.z_t(), sig.spatial, w);
    double oracle = 0.0;
    for (std::size_t k : ks) oracle += (s.inverted_state(k) - zero_gain(s, k) * blended).squaredNorm();
    EXPECT_NEAR(lawmm_loss_presample(s, sig, w, ks), oracle, 1e-10 * (1.0 + oracle));
  }
}

TEST(LawmmLoss, PostsampleMatchesScalarOracleOn4x4) {
  const Eigen::Index m = 4, n = 4;
  const auto key = zero_key(m, n);
  const auto sig = key.signature();
  const auto s = make_lawmm_sample(Rng(4).normal_matrix(m, n), key);
  const std::vector<std::size_t> ks{2, 10, 17};
  const double alpha = 0.1;
  const Matrix w = symmetric_soft_mask(m, n, 9);
  double oracle = 0.0;
  for (std::size_t k : ks) {
    const Matrix zk = zero_gain(s, k) * s.z_t();
    const Matrix delta = naive_blend_delta(zk, sig.spatial, w);
    const Matrix& target = s.inverted_state(k);
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0; j < n; ++j) {
        const double pred = zk(i, j) + delta(i, j) + alpha * sig.spatial(i, j) * w(i, j);
        oracle += (target(i, j) - pred) * (target(i, j) - pred);
      }
  }
  EXPECT_NEAR(lawmm_loss_postsample(s, sig, w, ks, alpha), oracle, 1e-10 * (1.0 + oracle));
}

TEST(LawmmLoss, MissingCheckpointErrors) {
  const auto key = zero_key(4, 4);
  const auto s = make_lawmm_sample(Rng(5).normal_matrix(4, 4), key);
  const Matrix w = Matrix::Zero(4, 4);
  EXPECT_THROW(lawmm_loss_presample(s, key.signature(), w, {0}), IndexError);
  EXPECT_THROW(lawmm_loss_postsample(s, key.signature(), w, {20}, 0.1), IndexError);
  EXPECT_THROW(lawmm_loss_presample(s, key.signature(), w, {}), ConfigError);
}

class LawmmGradient : public ::testing::TestWithParam<LawmmObjective> {};

TEST_P(LawmmGradient, AnalyticMatchesFiniteDifferenceOn8x8) {
  const auto key = zero_key(8, 8);
  std::vector<LawmmSample> samples;
  for (int i = 0; i < 2; ++i) samples.push_back(make_lawmm_sample(Rng(10 + i).normal_matrix(8, 8), key));
  LawmmConfig cfg;
  cfg.target_density = 0.1;
  cfg.objective = GetParam();
  cfg.fd_epsilon = 1e-6;
  const LawmmProblem problem(samples, key.signature(), cfg);
  const auto logits = initial_logits(8, 8, cfg);
  Vector theta = logits.theta();
  Rng rng(7);
  for (Eigen::Index k = 0; k < theta.size(); ++k) theta(k) += rng.normal();
  const Vector a = problem.gradient(logits, theta);
  const Vector f = problem.fd_gradient(logits, theta);
  const double rel = (a - f).cwiseAbs().maxCoeff() / f.cwiseAbs().maxCoeff();
  EXPECT_LT(rel, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Objectives, LawmmGradient,
                         ::testing::Values(LawmmObjective::presample, LawmmObjective::postsample));

TEST(LawmmGradient, PresampleNeedsLinearSampler) {
  const auto key = zero_key(4, 4);
  LawmmSample s;
  s.predictor = std::make_shared<FixedNoisePredictor>(Rng(2).normal_matrix(4, 4));
  s.schedule = key.schedule;
  s.trajectory = ddim_invert_trajectory(Rng(1).normal_matrix(4, 4), key.embed_schedule(), *s.predictor, s.schedule, 1.0);
  const Matrix w = Matrix::Zero(4, 4);
  EXPECT_THROW(lawmm_loss_gradient(s, key.signature(), w, {5}, LawmmObjective::presample, 0.0), ConfigError);
  EXPECT_NO_THROW(lawmm_loss_gradient(s, key.signature(), w, {5}, LawmmObjective::postsample, 0.0));
}

TEST(OptimizeMask, ZeroLearningRateReturnsBinarizedInit) {
  const auto key = zero_key(8, 8);
  LawmmConfig cfg;
  cfg.target_density = 0.1;
  cfg.iterations = 1;
  cfg.lr = 0.0;
  const LawmmProblem problem({make_lawmm_sample(Rng(1).normal_matrix(8, 8), key)}, key.signature(), cfg);
  const auto res = optimize_mask(problem);
  EXPECT_EQ(res.mask, threshold_mask(initial_logits(8, 8, cfg).expand(), 0.1));
  EXPECT_EQ(res.final_objective, res.initial_objective);
}

TEST(OptimizeMask, TraceNonIncreasingAndDeterministic) {
  const auto key = zero_key(10, 8);
  LawmmConfig cfg;
  cfg.target_density = 0.1;
  cfg.iterations = 40;
  std::vector<LawmmSample> samples;
  for (int i = 0; i < 3; ++i) samples.push_back(make_lawmm_sample(Rng(20 + i).normal_matrix(10, 8), key));
  const LawmmProblem problem(samples, key.signature(), cfg);
  const auto a = optimize_mask(problem);
  const auto b = optimize_mask(problem);
  EXPECT_EQ(a.mask, b.mask);
  ASSERT_FALSE(a.trace.empty());
  double prev = a.initial_objective;
  for (const auto& row : a.trace) {
    EXPECT_LE(row.loss, prev);
    prev = row.loss;
  }
  EXPECT_LE(a.final_objective, a.initial_objective);
  EXPECT_LT(a.final_objective, a.initial_objective);
}

TEST(OptimizeMask, BeatsRandomMaskOfEqualDensity) {
  const Eigen::Index m = 12, n = 12;
  const double rho = 0.1;
  int wins = 0;
  const int trials = 50;
  for (int t = 0; t < trials; ++t) {
    const auto key = zero_key(m, n, 20, 100 + t);
    LawmmConfig cfg;
    cfg.target_density = rho;
    cfg.iterations = 30;
    cfg.seed = t;
    std::vector<LawmmSample> samples;
    for (int i = 0; i < 3; ++i) samples.push_back(make_lawmm_sample(Rng(1000 * t + i).normal_matrix(m, n), key));
    const LawmmProblem problem(samples, key.signature(), cfg);
    const auto res = optimize_mask(problem);
    const auto random = random_symmetric_mask(m, n, rho, 5000 + t);
    ASSERT_LE(std::abs(static_cast<long>(res.mask.count()) - static_cast<long>(random.count())), 1);
    wins += problem.loss(res.mask.as_real()) <= problem.loss(random.as_real());
  }
  EXPECT_GE(wins, 40);
}

TEST(OptimizeMask, Errors) {
  const auto key = zero_key(4, 4);
  LawmmConfig cfg;
  EXPECT_THROW(LawmmProblem({}, key.signature(), cfg), ConfigError);
  cfg.iterations = 0;
  EXPECT_THROW(LawmmProblem({make_lawmm_sample(Matrix::Zero(4, 4), key)}, key.signature(), cfg), ConfigError);
  LawmmConfig bad;
  bad.target_density = 1.2;
  EXPECT_THROW(bad.validate(), ConfigError);
  // a signature this large overflows the squared loss
  LawmmConfig ok;
  ok.target_density = 0.2;
  Signature inf{Matrix::Constant(4, 4, 1e200), 1.0, 0};
  const LawmmProblem problem({make_lawmm_sample(Rng(1).normal_matrix(4, 4), key)}, inf, ok);
  EXPECT_THROW(optimize_mask(problem), OptimizationError);
}

TEST(OptimizeMask, TraceCsvHeader) {
  const std::string path = ::testing::TempDir() + "/lawmm_trace.csv";
  write_trace_csv(path, {{0, 1.5, 0.1, 2.0}});
  EXPECT_EQ(read_file(path).substr(0, 36), "iteration,loss,density,gradient_norm");
}
