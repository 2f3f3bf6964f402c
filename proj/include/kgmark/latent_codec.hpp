#pragma once

#include "kgmark/io.hpp"

namespace kgmark {

inline constexpr double kScaleFloor = 1e-8;

struct CodecStats {
  double mean = 0.0;
  double scale = 1.0;  ///< population std of the block, floored at kScaleFloor
};

/// Whitened community block: rows are entities in aligned order, cols are embedding dims.
struct LatentGrid {
  Matrix data;
  CodecStats stats;
  bool degenerate = false;
  std::size_t community_id = 0;
  std::vector<EntityId> entity_order;

  Eigen::Index rows() const { return data.rows(); }
  Eigen::Index cols() const { return data.cols(); }
};

inline CodecStats block_stats(const Matrix& block) {
  const double n = static_cast<double>(block.size());
  const double mean = block.sum() / n;
  const double var = (block.array() - mean).square().sum() / n;
  return {mean, std::max(std::sqrt(var), kScaleFloor)};
}

inline LatentGrid encode_block(const Matrix& block, std::size_t community_id,
                               std::vector<EntityId> entity_order) {
  if (block.rows() < 2 || block.cols() < 2)
    throw ShapeError("encode_block: block must be at least 2x2, got " +
                     shape_str(block.rows(), block.cols()));
  if (!all_finite(block)) throw NumericError("encode_block: non-finite entries");
  if (entity_order.size() != static_cast<std::size_t>(block.rows()))
    throw ShapeError("encode_block: entity_order size does not match block rows");
  LatentGrid g;
  g.stats = block_stats(block);
  const double n = static_cast<double>(block.size());
  const double raw_std = std::sqrt((block.array() - g.stats.mean).square().sum() / n);
  g.degenerate = raw_std < kScaleFloor;
  g.data = ((block.array() - g.stats.mean) / g.stats.scale).matrix();
  g.community_id = community_id;
  g.entity_order = std::move(entity_order);
  return g;
}

inline LatentGrid encode_block(const Matrix& block, std::size_t community_id = 0) {
  std::vector<EntityId> order(static_cast<std::size_t>(block.rows()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<EntityId>(i);
  return encode_block(block, community_id, std::move(order));
}

inline Matrix decode_block(const LatentGrid& grid) {
  return ((grid.data.array() * grid.stats.scale) + grid.stats.mean).matrix();
}

/// Same codec stats applied to a different grid (e.g. a watermarked latent).
inline Matrix decode_with(const Matrix& data, const CodecStats& stats) {
  return ((data.array() * stats.scale) + stats.mean).matrix();
}

inline json codec_meta_json(const LatentGrid& g) {
  return {{"codec", "whitening"},
          {"mean", g.stats.mean},
          {"scale", g.stats.scale},
          {"degenerate", g.degenerate},
          {"community_id", g.community_id},
          {"entity_order", g.entity_order}};
}

/// KGMK binary with one section plus a "<path>.meta.json" sidecar.
inline void save_latent_grid(const std::string& path, const LatentGrid& g) {
  write_file(path, encode_kgmk({g.data}));
  write_json(path + ".meta.json", codec_meta_json(g));
}

inline LatentGrid load_latent_grid(const std::string& path) {
  auto sections = decode_kgmk(read_file(path));
  if (sections.size() != 1) throw ParseError(path + ": expected a single grid section");
  const json meta = read_json(path + ".meta.json");
  LatentGrid g;
  try {
    g.data = std::move(sections[0]);
    g.stats.mean = meta.at("mean").get<double>();
    g.stats.scale = meta.at("scale").get<double>();
    g.degenerate = meta.at("degenerate").get<bool>();
    g.community_id = meta.at("community_id").get<std::size_t>();
    g.entity_order = meta.at("entity_order").get<std::vector<EntityId>>();
  } catch (const json::exception& e) {
    throw ParseError(path + ".meta.json: " + e.what());
  }
  if (g.stats.scale < kScaleFloor) throw ParseError(path + ": codec scale below floor");
  if (g.entity_order.size() != static_cast<std::size_t>(g.data.rows()))
    throw ParseError(path + ": entity_order size does not match grid rows");
  return g;
}

// Optional toy linear VAE over flattened blocks. Parameter count grows with
// (s*d)^2, so it is meant for small blocks only.

struct ToyVaeConfig {
  std::size_t latent_dim = 16;
  std::size_t epochs = 100;
  double lr = 0.01;
  double kl_weight = 1.0;
  std::uint64_t seed = 1;
  bool identity_init = false;  ///< requires latent_dim == s*d
  double init_logvar = -20.0;
};

struct ToyVae {
  Matrix enc_mean_w;    ///< latent x D
  Vector enc_mean_b;
  Matrix enc_logvar_w;  ///< latent x D
  Vector enc_logvar_b;
  Matrix dec_w;         ///< D x latent
  Vector dec_b;
  Eigen::Index block_rows = 0;
  Eigen::Index block_cols = 0;

  Vector encode_mean(const Matrix& block) const {
    return enc_mean_w * flatten(block) + enc_mean_b;
  }

  Matrix decode(const Vector& z) const {
    Vector x = dec_w * z + dec_b;
    return Eigen::Map<const Matrix>(x.data(), block_rows, block_cols);
  }

  /// Posterior-mean reconstruction.
  Matrix reconstruct(const Matrix& block) const { return decode(encode_mean(block)); }

  Vector flatten(const Matrix& block) const {
    if (block.rows() != block_rows || block.cols() != block_cols)
      throw ShapeError("ToyVae: block shape mismatch");
    return Eigen::Map<const Vector>(block.data(), block.size());
  }
};

/// Analytic KL(N(mu, diag exp(logvar)) || N(0, I)).
inline double gaussian_kl(const Vector& mu, const Vector& logvar) {
  double kl = 0.0;
  for (Eigen::Index i = 0; i < mu.size(); ++i)
    kl += 0.5 * (mu(i) * mu(i) + std::exp(logvar(i)) - 1.0 - logvar(i));
  return kl;
}

struct ToyVaeTraining {
  ToyVae model;
  std::vector<double> epoch_loss;  ///< mean of MSE + kl_weight*KL
};

inline ToyVaeTraining train_toy_vae(const std::vector<Matrix>& blocks, const ToyVaeConfig& cfg) {
  if (blocks.size() < 2) throw ConfigError("train_toy_vae: need at least 2 blocks");
  if (cfg.epochs < 1) throw ConfigError("train_toy_vae: epochs must be >= 1");
  if (cfg.latent_dim < 1) throw ConfigError("train_toy_vae: latent_dim must be >= 1");
  for (const auto& b : blocks) {
    if (b.rows() != blocks[0].rows() || b.cols() != blocks[0].cols())
      throw ConfigError("train_toy_vae: blocks have mismatched shapes");
    if (!all_finite(b)) throw NumericError("train_toy_vae: non-finite block");
  }
  const Eigen::Index D = blocks[0].size();
  const auto L = static_cast<Eigen::Index>(cfg.latent_dim);
  if (cfg.identity_init && L != D)
    throw ConfigError("train_toy_vae: identity init requires latent_dim == rows*cols");

  Rng rng(derive_seed(cfg.seed, "toy-vae"));
  ToyVaeTraining out;
  ToyVae& m = out.model;
  m.block_rows = blocks[0].rows();
  m.block_cols = blocks[0].cols();
  if (cfg.identity_init) {
    m.enc_mean_w = Matrix::Identity(L, D);
    m.dec_w = Matrix::Identity(D, L);
  } else {
    m.enc_mean_w = rng.normal_matrix(L, D, 1.0 / std::sqrt(static_cast<double>(D)));
    m.dec_w = rng.normal_matrix(D, L, 1.0 / std::sqrt(static_cast<double>(L)));
  }
  m.enc_mean_b = Vector::Zero(L);
  m.enc_logvar_w = Matrix::Zero(L, D);
  m.enc_logvar_b = Vector::Constant(L, cfg.init_logvar);
  m.dec_b = Vector::Zero(D);

  const double inv_d = 1.0 / static_cast<double>(D);
  const double inv_b = 1.0 / static_cast<double>(blocks.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Matrix g_we = Matrix::Zero(L, D), g_wv = Matrix::Zero(L, D), g_wd = Matrix::Zero(D, L);
    Vector g_be = Vector::Zero(L), g_bv = Vector::Zero(L), g_bd = Vector::Zero(D);
    double loss = 0.0;
    for (const auto& block : blocks) {
      const Vector x = m.flatten(block);
      const Vector mu = m.enc_mean_w * x + m.enc_mean_b;
      const Vector lv = m.enc_logvar_w * x + m.enc_logvar_b;
      const Vector sigma = (0.5 * lv.array()).exp().matrix();
      Vector eps(L);
      for (Eigen::Index i = 0; i < L; ++i) eps(i) = rng.normal();
      const Vector z = mu + sigma.cwiseProduct(eps);
      const Vector xhat = m.dec_w * z + m.dec_b;
      const Vector diff = xhat - x;
      loss += diff.squaredNorm() * inv_d + cfg.kl_weight * gaussian_kl(mu, lv);

      const Vector g_xhat = 2.0 * inv_d * diff;
      const Vector g_z = m.dec_w.transpose() * g_xhat;
      const Vector g_mu = g_z + cfg.kl_weight * mu;
      const Vector g_lv = (g_z.array() * eps.array() * sigma.array() * 0.5 +
                           cfg.kl_weight * 0.5 * (sigma.array().square() - 1.0))
                              .matrix();
      g_wd.noalias() += g_xhat * z.transpose();
      g_bd += g_xhat;
      g_we.noalias() += g_mu * x.transpose();
      g_be += g_mu;
      g_wv.noalias() += g_lv * x.transpose();
      g_bv += g_lv;
    }
    out.epoch_loss.push_back(loss * inv_b);
    if (!std::isfinite(loss)) throw OptimizationError("train_toy_vae: loss diverged at epoch " +
                                                      std::to_string(epoch));
    const double step = cfg.lr * inv_b;
    m.enc_mean_w -= step * g_we;
    m.enc_mean_b -= step * g_be;
    m.enc_logvar_w -= step * g_wv;
    m.enc_logvar_b -= step * g_bv;
    m.dec_w -= step * g_wd;
    m.dec_b -= step * g_bd;
  }
  return out;
}

}  // namespace kgmark
