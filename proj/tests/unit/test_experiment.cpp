#include "kgmark/experiment.hpp"

#include <gtest/gtest.h>

using namespace kgmark;

namespace {

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.sbm.n_entities = 200;
  c.kge.dim = 16;
  c.kge.epochs = 10;
  c.community_size = 100;
  c.trials = 6;
  c.rank_test_triples = 20;
  c.attacks = {{AttackSpec{AttackKind::none}, {0.0}}, {AttackSpec{AttackKind::triple_deletion}, {0.3}}};
  return c;
}

}  // namespace

TEST(ExperimentConfig, EnumeratesEveryProblem) {
  json j = small_config().to_json();
  j["trials"] = 0;
  j["density"] = 1.5;
  j["mask"] = "fancy";
  j["bogus"] = true;
  try {
    ExperimentConfig::from_json(j);
    FAIL() << "expected ConfigErrors";
  } catch (const ConfigErrors& e) {
    EXPECT_EQ(e.errors.size(), 4u);
    const std::string all = e.what();
    EXPECT_NE(all.find("trials"), std::string::npos);
    EXPECT_NE(all.find("density"), std::string::npos);
    EXPECT_NE(all.find("mask"), std::string::npos);
    EXPECT_NE(all.find("bogus"), std::string::npos);
  }
}

TEST(ExperimentConfig, TrialsZeroRejectedBeforeCompute) {
  auto c = small_config();
  c.trials = 0;
  EXPECT_THROW(run_experiment(c), ConfigError);
  EXPECT_THROW(build_context(c), ConfigError);
}

TEST(ExperimentConfig, JsonRoundTrip) {
  auto c = small_config();
  c.attacks.push_back({AttackSpec{AttackKind::gaussian_noise}, {0.1, 0.5}});
  c.mask = "lawmm";
  const auto back = ExperimentConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(expand_rows(back).size(), 4u);
  EXPECT_THROW(ExperimentConfig::from_json(json::array()), ConfigErrors);
  json wrong = c.to_json();
  wrong["steps"] = "many";
  EXPECT_THROW(ExperimentConfig::from_json(wrong), ConfigErrors);
}

TEST(Experiment, ReportShapeAndDeterminism) {
  const auto c = small_config();
  const auto ctx = build_context(c);
  const auto a = run_experiment(ctx, c);
  const auto b = run_experiment(build_context(c), c);
  EXPECT_EQ(a.rows_csv(), b.rows_csv());
  EXPECT_EQ(a.trials_csv(), b.trials_csv());
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());

  const std::string csv = a.rows_csv();
  EXPECT_EQ(csv.rfind("# ", 0), 0u);
  EXPECT_NE(csv.find("\ndataset,method,attack,intensity,auc,tpr_at_fpr_1pct,cosine_50,cosine_65,cosine_75,"
                     "gmr,hmr,amr,hits10\n"),
            std::string::npos);
  ASSERT_EQ(a.rows.size(), 2u);
  EXPECT_EQ(a.trials.size(), 2u * 2u * c.trials);
  for (const auto& r : a.rows) {
    EXPECT_GE(r.auc, 0.0);
    EXPECT_LE(r.auc, 1.0);
    EXPECT_EQ(r.cosine.size(), 3u);
    EXPECT_GE(r.gmr, 1.0);
  }
  // clean watermark is found, and the score orientation puts positives on top
  EXPECT_EQ(a.rows[0].auc, 1.0);
  EXPECT_EQ(a.rows[0].detection_rate, 1.0);
  EXPECT_EQ(a.rows[0].false_positive_rate, 0.0);
}

TEST(Experiment, WritesArtifacts) {
  auto c = small_config();
  c.trials = 2;
  c.attacks.clear();
  const auto rep = run_experiment(c);
  const std::string dir = ::testing::TempDir() + "/kgmark_exp";
  rep.write(dir);
  EXPECT_EQ(read_file(dir + "/report.csv"), rep.rows_csv());
  const json j = json::parse(read_file(dir + "/summary.json"));
  EXPECT_EQ(j.at("rows").size(), 1u);
  EXPECT_EQ(j.at("rows")[0].at("attack"), "none");
}

TEST(Experiment, StepCountBarelyMovesCosine) {
  // The whitening codec and the linear sampler are exactly invertible here, so the step
  // count only changes how much the sampler damps the embedded delta.
  auto c = small_config();
  c.trials = 4;
  c.attacks.clear();
  const auto rep = run_experiment(c);
  const auto& cos = rep.rows[0].cosine;
  EXPECT_LT(std::abs(cos[0] - cos[2]), 0.005);
  EXPECT_GT(cos[2], 0.9);
}

TEST(Experiment, AucNonIncreasingInIntensity) {
  ExperimentConfig c;
  c.trials = 200;
  c.cosine_steps = {75};
  c.rank_test_triples = 0;
  for (auto k : {AttackKind::gaussian_noise, AttackKind::smoothing, AttackKind::relation_alteration,
                 AttackKind::triple_deletion})
    c.attacks.push_back({AttackSpec{k}, {0.1, 0.3, 0.5}});
  const auto rep = run_experiment(c);
  ASSERT_EQ(rep.rows.size(), 12u);
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t i = 1; i < 3; ++i) {
      const auto& prev = rep.rows[3 * a + i - 1];
      const auto& cur = rep.rows[3 * a + i];
      EXPECT_LE(cur.auc, prev.auc) << cur.attack << " " << cur.intensity;
    }
}
