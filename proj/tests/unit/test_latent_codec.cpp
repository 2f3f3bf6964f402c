#include "kgmark/latent_codec.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace kgmark;

TEST(EncodeBlock, ZeroBlockIsDegenerate) {
  const auto g = encode_block(Matrix::Zero(4, 6));
  EXPECT_TRUE(g.degenerate);
  EXPECT_EQ(g.stats.scale, kScaleFloor);
  EXPECT_TRUE(g.data.isZero(0.0));
  EXPECT_TRUE(decode_block(g).isZero(0.0));
}

TEST(EncodeBlock, ConstantBlockDecodesToMean) {
  const auto g = encode_block(Matrix::Constant(3, 3, 2.5));
  EXPECT_TRUE(g.degenerate);
  EXPECT_TRUE((decode_block(g).array() == 2.5).all());
}

TEST(EncodeBlock, WhitensToZeroMeanUnitVariance) {
  Rng rng(3);
  Matrix block = (rng.normal_matrix(20, 16).array() * 2.0 + 5.0).matrix();
  const auto g = encode_block(block);
  EXPECT_FALSE(g.degenerate);
  const double n = static_cast<double>(g.data.size());
  const double mean = g.data.sum() / n;
  const double var = (g.data.array() - mean).square().sum() / n;
  EXPECT_NEAR(mean, 0.0, 1e-12);
  EXPECT_NEAR(var, 1.0, 1e-12);
  EXPECT_NEAR(g.stats.mean, block.sum() / n, 1e-12);
}

TEST(EncodeBlock, RoundTripExact) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix block = rng.normal_matrix(2 + trial % 7, 2 + trial % 5, 0.1 + trial);
    const auto g = encode_block(block, 3);
    EXPECT_LT((decode_block(g) - block).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(EncodeBlock, Preconditions) {
  EXPECT_THROW(encode_block(Matrix::Zero(1, 4)), ShapeError);
  EXPECT_THROW(encode_block(Matrix::Zero(4, 1)), ShapeError);
  EXPECT_THROW(encode_block(Matrix::Zero(3, 3), 0, {0, 1}), ShapeError);
  Matrix bad = Matrix::Zero(2, 2);
  bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(encode_block(bad), NumericError);
}

TEST(LatentGridFile, RoundTripWithSidecar) {
  Rng rng(5);
  const auto g = encode_block(rng.normal_matrix(3, 4), 7, {9, 2, 5});
  const auto path = (std::filesystem::temp_directory_path() / "kgmark_grid_test.kgmk").string();
  save_latent_grid(path, g);
  const auto back = load_latent_grid(path);
  EXPECT_TRUE(back.data == g.data);
  EXPECT_EQ(back.stats.mean, g.stats.mean);
  EXPECT_EQ(back.stats.scale, g.stats.scale);
  EXPECT_EQ(back.community_id, 7u);
  EXPECT_EQ(back.entity_order, g.entity_order);
  std::filesystem::remove(path);
  std::filesystem::remove(path + ".meta.json");
}

namespace {

std::vector<Matrix> random_blocks(std::size_t count, Eigen::Index r, Eigen::Index c,
                                  std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Matrix> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(rng.normal_matrix(r, c));
  return out;
}

}  // namespace

TEST(ToyVae, IdentityInitOvercompleteFitsExactly) {
  const auto blocks = random_blocks(10, 3, 4, 8);
  ToyVaeConfig cfg;
  cfg.latent_dim = 12;
  cfg.kl_weight = 0.0;
  cfg.identity_init = true;
  cfg.epochs = 20;
  cfg.lr = 0.01;
  const auto trained = train_toy_vae(blocks, cfg);
  double mse = 0.0;
  for (const auto& b : blocks) mse += (trained.model.reconstruct(b) - b).squaredNorm() / 12.0;
  EXPECT_LT(mse / 10.0, 1e-6);
}

TEST(ToyVae, LossDecreasesAndIsDeterministic) {
  const auto blocks = random_blocks(10, 3, 4, 9);
  ToyVaeConfig cfg;
  cfg.latent_dim = 6;
  cfg.kl_weight = 0.1;
  cfg.init_logvar = -2.0;
  cfg.epochs = 200;
  cfg.lr = 0.05;
  const auto a = train_toy_vae(blocks, cfg);
  EXPECT_LT(a.epoch_loss.back(), a.epoch_loss.front());
  const auto b = train_toy_vae(blocks, cfg);
  EXPECT_TRUE(a.model.enc_mean_w == b.model.enc_mean_w);
  EXPECT_TRUE(a.model.dec_w == b.model.dec_w);
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
}

TEST(ToyVae, ConfigErrors) {
  auto blocks = random_blocks(3, 2, 2, 1);
  ToyVaeConfig cfg;
  cfg.latent_dim = 2;
  cfg.epochs = 0;
  EXPECT_THROW(train_toy_vae(blocks, cfg), ConfigError);
  cfg.epochs = 1;
  blocks.push_back(Matrix::Zero(3, 2));
  EXPECT_THROW(train_toy_vae(blocks, cfg), ConfigError);
  EXPECT_THROW(train_toy_vae({Matrix::Zero(2, 2)}, cfg), ConfigError);
}

TEST(ToyVae, KlIsNonNegative) {
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    Vector mu(5), lv(5);
    for (int k = 0; k < 5; ++k) {
      mu(k) = rng.normal(0.0, 3.0);
      lv(k) = rng.uniform(-10.0, 10.0);
    }
    EXPECT_GE(gaussian_kl(mu, lv), 0.0);
  }
}
