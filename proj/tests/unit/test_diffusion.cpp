#include "kgmark/diffusion.hpp"

#include <gtest/gtest.h>

using namespace kgmark;

namespace {

double cosine(const Matrix& a, const Matrix& b) {
  return (a.array() * b.array()).sum() / (a.norm() * b.norm());
}

std::vector<std::size_t> all_steps_desc(std::size_t T) {
  std::vector<std::size_t> s;
  for (std::size_t t = T; t >= 1; --t) s.push_back(t);
  return s;
}

}  // namespace

TEST(NoiseSchedule, LinearDefaultAndJson) {
  const auto s = NoiseSchedule::linear(75);
  EXPECT_EQ(s.T(), 75u);
  EXPECT_DOUBLE_EQ(s.alpha_bar(0), 0.9999);
  EXPECT_DOUBLE_EQ(s.alpha_bar(75), 0.01);
  for (std::size_t t = 1; t <= 75; ++t) EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
  const auto j = s.to_json();
  EXPECT_EQ(j.at("type"), "linear");
  EXPECT_EQ(j.at("T"), 75);
  const auto back = NoiseSchedule::from_json(j);
  EXPECT_EQ(back.alphas(), s.alphas());
  EXPECT_THROW(NoiseSchedule({0.5, 0.6}), ConfigError);
  EXPECT_THROW(NoiseSchedule({1.2, 0.6}), ConfigError);
  EXPECT_THROW(s.alpha_bar(76), IndexError);
}

TEST(ForwardDiffuse, LimitsAndOracle) {
  Rng rng(1);
  const Matrix z0 = rng.normal_matrix(4, 5);
  const Matrix eps = rng.normal_matrix(4, 5);
  const NoiseSchedule unit({1.0, 0.75, 0.5});
  EXPECT_TRUE(forward_diffuse(z0, 0, eps, unit) == z0);
  EXPECT_TRUE(forward_diffuse(Matrix::Zero(4, 5), 1, eps, unit) == 0.5 * eps);
  const auto s = NoiseSchedule::linear(10);
  const Matrix zt = forward_diffuse(z0, 7, eps, s);
  const double a = s.alpha_bar(7);
  for (Eigen::Index i = 0; i < 4; ++i)
    for (Eigen::Index j = 0; j < 5; ++j)
      EXPECT_NEAR(zt(i, j), std::sqrt(a) * z0(i, j) + std::sqrt(1 - a) * eps(i, j), 1e-15);
  EXPECT_THROW(forward_diffuse(z0, 11, eps, s), IndexError);
  EXPECT_THROW(forward_diffuse(z0, 3, Matrix::Zero(5, 4), s), ShapeError);
}

TEST(PredictClean, ZeroExactAndLinear) {
  Rng rng(2);
  const auto s = NoiseSchedule::linear(20);
  const Matrix z0 = rng.normal_matrix(6, 6);
  const Matrix eps = rng.normal_matrix(6, 6);
  const Matrix zt = forward_diffuse(z0, 12, eps, s);
  const double a = s.alpha_bar(12);
  EXPECT_LT((predict_clean(zt, 12, ZeroPredictor{}, s) - zt / std::sqrt(a)).cwiseAbs().maxCoeff(),
            1e-15);
  EXPECT_LT((predict_clean(zt, 12, FixedNoisePredictor(eps), s) - z0).cwiseAbs().maxCoeff(), 1e-12);
  const auto lin = LinearPredictor::constant(20, 0.1);
  const Matrix got = predict_clean(zt, 12, lin, s);
  for (Eigen::Index i = 0; i < 6; ++i)
    EXPECT_NEAR(got(i, 3), (zt(i, 3) - std::sqrt(1 - a) * 0.1 * zt(i, 3)) / std::sqrt(a), 1e-14);
  const NoiseSchedule tiny({1.0, 1e-13});
  EXPECT_THROW(predict_clean(zt, 1, ZeroPredictor{}, tiny), NumericError);
}

TEST(DdimStep, ZeroPredictorRescales) {
  Rng rng(3);
  const auto s = NoiseSchedule::linear(30);
  const Matrix z = rng.normal_matrix(5, 7);
  const Matrix next = ddim_step(z, 17, ZeroPredictor{}, s);
  EXPECT_LT((next - std::sqrt(s.alpha_bar(16) / s.alpha_bar(17)) * z).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_THROW(ddim_step(z, 0, ZeroPredictor{}, s), IndexError);
  EXPECT_THROW(ddim_step(z, 3, ZeroPredictor{}, s, 1.5), ConfigError);
}

TEST(DdimStep, EtaOneWithExactNoiseReproducesForwardState) {
  Rng rng(4);
  const auto s = NoiseSchedule::linear(75);
  for (std::size_t t : {1u, 10u, 40u, 75u}) {
    const Matrix z0 = rng.normal_matrix(8, 8);
    const Matrix eps = rng.normal_matrix(8, 8);
    const Matrix zt = forward_diffuse(z0, t, eps, s);
    const Matrix prev = ddim_step(zt, t, FixedNoisePredictor(eps), s, 1.0);
    EXPECT_LT((prev - forward_diffuse(z0, t - 1, eps, s)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(DdimStep, PredictorShapeContract) {
  const auto s = NoiseSchedule::linear(5);
  EXPECT_THROW(ddim_step(Matrix::Zero(3, 3), 2, FixedNoisePredictor(Matrix::Zero(2, 3)), s),
               ShapeError);
}

TEST(DdimSample, ZeroPredictorTelescopes) {
  Rng rng(5);
  const auto s = NoiseSchedule::linear(75);
  const Matrix zT = rng.normal_matrix(6, 9);
  const Matrix full = ddim_sample(zT, all_steps_desc(75), ZeroPredictor{}, s);
  const Matrix expect = zT * std::sqrt(s.alpha_bar(0) / s.alpha_bar(75));
  EXPECT_LT((full - expect).cwiseAbs().maxCoeff(), 1e-12);
  for (std::size_t n : {1u, 5u, 13u, 50u}) {
    const Matrix sub = ddim_sample(zT, descending(evenly_spaced_steps(75, n)), ZeroPredictor{}, s);
    EXPECT_LT((sub - full).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(DdimSample, SingleStepAndValidation) {
  Rng rng(6);
  const auto s = NoiseSchedule::linear(75);
  const Matrix zT = rng.normal_matrix(4, 4);
  const auto lin = LinearPredictor::constant(75, 0.3);
  EXPECT_TRUE(ddim_sample(zT, {75}, lin, s) == ddim_step(zT, 75, 0, lin, s));
  EXPECT_THROW(ddim_sample(zT, {3, 5}, lin, s), ConfigError);
  EXPECT_THROW(ddim_sample(zT, {}, lin, s), ConfigError);
  EXPECT_THROW(ddim_sample(zT, {80}, lin, s), IndexError);
}

TEST(DdimSample, LinearityWithZeroPredictor) {
  Rng rng(7);
  const auto s = NoiseSchedule::linear(75);
  const auto steps = all_steps_desc(75);
  const Matrix x = rng.normal_matrix(5, 5), y = rng.normal_matrix(5, 5);
  const Matrix lhs = ddim_sample(2.0 * x - 0.5 * y, steps, ZeroPredictor{}, s);
  const Matrix rhs =
      2.0 * ddim_sample(x, steps, ZeroPredictor{}, s) - 0.5 * ddim_sample(y, steps, ZeroPredictor{}, s);
  EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(DdimSample, SeventyFiveStepsFinite) {
  Rng rng(8);
  const auto s = NoiseSchedule::linear(75);
  const auto lin = LinearPredictor::pretrained(s, 16, 16, 1);
  const Matrix out = ddim_sample(rng.normal_matrix(16, 16), all_steps_desc(75), lin, s, 1.0);
  EXPECT_EQ(out.rows(), 16);
  EXPECT_TRUE(all_finite(out));
}

TEST(DdimInvert, ZeroPredictorRoundTripExact) {
  Rng rng(9);
  const auto s = NoiseSchedule::linear(75);
  const auto asc = evenly_spaced_steps(75, 50);
  for (int i = 0; i < 20; ++i) {
    const Matrix z = rng.normal_matrix(8, 8);
    const Matrix zT = ddim_invert(z, asc, ZeroPredictor{}, s);
    const Matrix back = ddim_sample(zT, descending(asc), ZeroPredictor{}, s);
    EXPECT_LT((back - z).cwiseAbs().maxCoeff(), 1e-9);
    const Matrix again = ddim_invert(ddim_sample(z, descending(asc), ZeroPredictor{}, s), asc,
                                     ZeroPredictor{}, s);
    EXPECT_LT((again - z).cwiseAbs().maxCoeff(), 1e-9);
  }
  EXPECT_THROW(ddim_invert(Matrix::Zero(2, 2), {}, ZeroPredictor{}, s), ConfigError);
  EXPECT_THROW(ddim_invert(Matrix::Zero(2, 2), {5, 3}, ZeroPredictor{}, s), ConfigError);
}

TEST(DdimInvert, LinearPredictorRoundTripCosine) {
  Rng rng(10);
  const auto s = NoiseSchedule::linear(75);
  const auto lin = LinearPredictor::pretrained(s, 12, 12, 3);
  const auto asc = evenly_spaced_steps(75, 75);
  for (double eta : {0.0, 1.0}) {
    for (int i = 0; i < 100; ++i) {
      const Matrix z = rng.normal_matrix(12, 12);
      const Matrix back = ddim_invert(ddim_sample(z, descending(asc), lin, s, eta), asc, lin, s, eta);
      EXPECT_GT(cosine(back, z), 0.99);
    }
  }
}

TEST(DdimInvert, ExactWithFixedNoiseAtEtaOne) {
  Rng rng(11);
  const auto s = NoiseSchedule::linear(75);
  const FixedNoisePredictor fixed(rng.normal_matrix(6, 6));
  const auto asc = evenly_spaced_steps(75, 75);
  const Matrix z = rng.normal_matrix(6, 6);
  const Matrix back = ddim_invert(ddim_sample(z, descending(asc), fixed, s, 1.0), asc, fixed, s, 1.0);
  EXPECT_LT((back - z).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(LinearPredictor, FitApproximatesNoiseLevel) {
  const auto s = NoiseSchedule::linear(75);
  const auto lin = LinearPredictor::pretrained(s, 32, 32, 4);
  for (std::size_t t : {5u, 30u, 75u})
    EXPECT_NEAR(lin.coeff(t), std::sqrt(1.0 - s.alpha_bar(t)), 0.05);
  const auto again = LinearPredictor::pretrained(s, 32, 32, 4);
  EXPECT_EQ(lin.coeffs(), again.coeffs());
}

TEST(SampleGain, MatchesLinearSampling) {
  Rng rng(12);
  const auto s = NoiseSchedule::linear(75);
  const auto lin = LinearPredictor::pretrained(s, 8, 8, 5);
  const auto desc = descending(evenly_spaced_steps(75, 75));
  const Matrix z = rng.normal_matrix(8, 8);
  for (double eta : {0.0, 1.0}) {
    const auto g = sample_gain(desc, lin, s, eta);
    ASSERT_TRUE(g.has_value());
    EXPECT_LT((ddim_sample(z, desc, lin, s, eta) - *g * z).cwiseAbs().maxCoeff(), 1e-10);
  }
  EXPECT_FALSE(sample_gain(desc, FixedNoisePredictor(z), s, 0.0).has_value());
}
