#pragma once

#include "kgmark/detector.hpp"
#include "kgmark/graph_ops.hpp"
#include "kgmark/latent_codec.hpp"

#include <Eigen/QR>

#include <map>

namespace kgmark {

// Layers of a key mask. Phi is the community-level layer: cells at row frequency 0,
// i.e. the spectrum of the column sums over the community, which no reordering of
// rows inside the community can change. Psi is the vertex-level layer: every other
// masked cell, written only into the rows of the highest-centrality members.

struct MaskLayers {
  MaskMatrix phi;
  MaskMatrix psi;
};

inline bool in_phi_band(Cell c) { return c.row == 0 && c.col != 0; }

inline MaskLayers split_layers(const MaskMatrix& mask) {
  MaskMatrix::Bits phi = MaskMatrix::Bits::Zero(mask.rows(), mask.cols());
  MaskMatrix::Bits psi = phi;
  for (const Cell& c : mask.cells()) (in_phi_band(c) ? phi : psi)(c.row, c.col) = 1;
  return {MaskMatrix(std::move(phi)), MaskMatrix(std::move(psi))};
}

namespace detail {

/// Pairs ranked by score (desc), ties by representative (row, col), restricted to a band.
inline std::vector<Cell> ranked_pairs(const Matrix& scores, bool phi_band) {
  std::vector<Cell> reps;
  for (const Cell& c : pair_representatives(scores.rows(), scores.cols()))
    if (!(c.row == 0 && c.col == 0) && in_phi_band(c) == phi_band) reps.push_back(c);
  std::stable_sort(reps.begin(), reps.end(), [&](const Cell& a, const Cell& b) {
    return scores(a.row, a.col) > scores(b.row, b.col);
  });
  return reps;
}

}  // namespace detail

inline Eigen::Index psi_rows(Eigen::Index community_size) { return (community_size + 3) / 4; }

/// Minimum circular row-frequency gap between Psi cells sharing a column (and from row
/// frequency 0). At this gap the Fourier rows restricted to psi_rows(m) rows are close to
/// orthogonal, which keeps the row-restricted least-squares embedding well conditioned.
inline Eigen::Index psi_row_gap(Eigen::Index m) {
  const Eigen::Index r = psi_rows(m);
  return (m + r - 1) / r;
}

namespace detail {

inline Eigen::Index circular_gap(Eigen::Index a, Eigen::Index b, Eigen::Index m) {
  const Eigen::Index d = ((a - b) % m + m) % m;
  return std::min(d, m - d);
}

}  // namespace detail

/// ceil(density*m*n) cells, half the budget (as far as the band allows) at row frequency
/// 0 and the rest elsewhere; each half filled by pairs in decreasing score order. Psi pairs
/// keep psi_row_gap(m) apart within a column; if that cannot fill the budget, the rest is
/// filled without the gap rule.
inline MaskMatrix layered_mask_from_scores(const Matrix& scores, double density) {
  if (!(density > 0.0 && density < 1.0)) throw ConfigError("mask density must lie in (0, 1)");
  const Eigen::Index m = scores.rows(), n = scores.cols();
  if (m < 2 || n < 2) throw ShapeError("layered mask: grid must be at least 2x2");
  const auto total = static_cast<std::size_t>(
      std::ceil(density * static_cast<double>(m) * static_cast<double>(n) - 1e-9));
  MaskMatrix::Bits bits = MaskMatrix::Bits::Zero(m, n);
  std::size_t count = 0;
  const Eigen::Index gap = psi_row_gap(m);
  auto spaced = [&](Cell c) {
    if (detail::circular_gap(c.row, 0, m) < gap) return false;
    for (Eigen::Index i = 0; i < m; ++i)
      if (bits(i, c.col) && i != 0 && detail::circular_gap(i, c.row, m) < gap) return false;
    return true;
  };
  auto take = [&](const std::vector<Cell>& ranked, std::size_t budget, bool use_gap) {
    for (const Cell& c : ranked) {
      if (count >= budget) break;
      if (bits(c.row, c.col)) continue;
      const Cell p = hermitian_partner(c, m, n);
      if (use_gap) {
        if (!spaced(c) || !spaced(p)) continue;
        if (p.col == c.col && p != c && detail::circular_gap(p.row, c.row, m) < gap) continue;
      }
      bits(c.row, c.col) = bits(p.row, p.col) = 1;
      count += p == c ? 1 : 2;
    }
  };
  take(detail::ranked_pairs(scores, true), (total + 1) / 2, false);
  const auto psi = detail::ranked_pairs(scores, false);
  take(psi, total, true);
  take(psi, total, false);
  return MaskMatrix(std::move(bits));
}

inline MaskMatrix random_layered_mask(Eigen::Index m, Eigen::Index n, double density,
                                      std::uint64_t seed) {
  Rng rng(derive_seed(seed, "random-mask"));
  Matrix scores(m, n);
  for (Eigen::Index k = 0; k < scores.size(); ++k) scores.data()[k] = rng.uniform();
  return layered_mask_from_scores(scores, density);
}

/// Minimum-norm perturbation supported on the first `rows` rows whose spectrum equals
/// `target` on the `write` cells and 0 on the `hold` cells and at DC.
///
/// With D_i the DFT of row i, F(k, l) = sum_i w_m^{ik} D_i(l), so every constraint touches one
/// column frequency only and |delta|^2 is a uniformly weighted sum of |D_i(l)|^2 within each
/// column pair {l, n-l}. The problem splits into one small real system per column.
inline Matrix row_restricted_delta(const ComplexMatrix& target, const MaskMatrix& write,
                                   const MaskMatrix& hold, Eigen::Index rows) {
  const Eigen::Index m = target.rows(), n = target.cols();
  if (rows < 1 || rows > m) throw ConfigError("row_restricted_delta: bad row count");
  struct Constraint {
    Eigen::Index k;
    std::complex<double> value;
  };
  // constraints keyed by column l in [0, n/2]
  std::vector<std::vector<Constraint>> by_col(static_cast<std::size_t>(n / 2 + 1));
  for (const Cell& c : pair_representatives(m, n)) {
    std::complex<double> v;
    if (write.at(c)) {
      v = target(c.row, c.col);
    } else if (hold.at(c) || (c.row == 0 && c.col == 0)) {
      v = 0.0;
    } else {
      continue;
    }
    if (2 * c.col > n) {
      const Cell p = hermitian_partner(c, m, n);
      by_col[static_cast<std::size_t>(p.col)].push_back({p.row, std::conj(v)});
    } else {
      by_col[static_cast<std::size_t>(c.col)].push_back({c.row, v});
    }
  }

  ComplexMatrix d = ComplexMatrix::Zero(rows, n);  // row DFTs of delta
  for (Eigen::Index l = 0; l <= n / 2; ++l) {
    const auto& cons = by_col[static_cast<std::size_t>(l)];
    if (cons.empty()) continue;
    const bool real_col = l == 0 || 2 * l == n;  // D_i(l) must be real here
    const Eigen::Index unknowns = real_col ? rows : 2 * rows;
    std::vector<Eigen::VectorXd> eqs;
    std::vector<double> rhs;
    for (const auto& c : cons) {
      Eigen::VectorXd re = Eigen::VectorXd::Zero(unknowns), im = Eigen::VectorXd::Zero(unknowns);
      for (Eigen::Index i = 0; i < rows; ++i) {
        const double th = 2.0 * std::numbers::pi * static_cast<double>((i * c.k) % m) / static_cast<double>(m);
        const double co = std::cos(th), si = std::sin(th);
        // (co - i si)(x + i y)
        re(i) = co;
        im(i) = -si;
        if (!real_col) {
          re(rows + i) = si;
          im(rows + i) = co;
        }
      }
      eqs.push_back(re);
      rhs.push_back(c.value.real());
      if (!(real_col && is_self_conjugate(Cell{c.k, l}, m, n))) {
        eqs.push_back(im);
        rhs.push_back(c.value.imag());
      }
    }
    Eigen::MatrixXd a(static_cast<Eigen::Index>(eqs.size()), unknowns);
    Eigen::VectorXd b(static_cast<Eigen::Index>(eqs.size()));
    for (std::size_t r = 0; r < eqs.size(); ++r) {
      a.row(static_cast<Eigen::Index>(r)) = eqs[r].transpose();
      b(static_cast<Eigen::Index>(r)) = rhs[r];
    }
    const Eigen::VectorXd x = a.completeOrthogonalDecomposition().solve(b);
    for (Eigen::Index i = 0; i < rows; ++i) {
      const std::complex<double> v(x(i), real_col ? 0.0 : x(rows + i));
      d(i, l) = v;
      if (!real_col) d(i, n - l) = std::conj(v);
    }
  }

  Matrix delta = Matrix::Zero(m, n);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      std::complex<double> acc = 0.0;
      for (Eigen::Index l = 0; l < n; ++l) {
        const double th = 2.0 * std::numbers::pi * static_cast<double>((j * l) % n) / static_cast<double>(n);
        acc += d(i, l) * std::complex<double>(std::cos(th), std::sin(th));
      }
      delta(i, j) = acc.real() / static_cast<double>(n);
    }
  return delta;
}

/// Both layers applied to an inverted latent: Phi over the full block, then Psi through
/// the top psi_rows(m) rows with the Phi cells held fixed.
inline Matrix embed_layers(const Matrix& z_t, const Signature& sig, const MaskMatrix& mask) {
  require_same_shape(z_t, sig.spatial, "embed_layers");
  const auto layers = split_layers(mask);
  Matrix z = layers.phi.count() > 0 ? embed_watermark(z_t, sig, layers.phi) : z_t;
  if (layers.psi.count() == 0) return z;
  const ComplexMatrix target = fft2(sig.spatial) - fft2(z);
  return z + row_restricted_delta(target, layers.psi, layers.phi, psi_rows(z.rows()));
}

struct CommunityGrid {
  std::size_t community_id = 0;
  LatentGrid grid;
};

inline std::vector<CommunityGrid> community_grids(const CommunityPartition& part,
                                                  const Matrix& entities) {
  std::vector<CommunityGrid> out;
  for (std::size_t c = 0; c < part.l(); ++c) {
    const auto& members = part.communities[c];
    if (members.size() < 2) throw ConfigError("community smaller than 2");
    out.push_back({c, encode_block(reorder_rows(entities, members), c, members)});
  }
  return out;
}

inline std::optional<std::size_t> find_key(const std::vector<WatermarkKey>& ring, Eigen::Index m,
                                           Eigen::Index n) {
  for (std::size_t k = 0; k < ring.size(); ++k)
    if (ring[k].m() == m && ring[k].n() == n) return k;
  return std::nullopt;
}

/// Community size used at embedding time; every key in a ring carries it.
inline std::size_t ring_community_size(const std::vector<WatermarkKey>& ring) {
  if (ring.empty()) throw ConfigError("empty key ring");
  const auto& k = ring.front();
  return k.community_size > 0 ? k.community_size : static_cast<std::size_t>(k.m());
}

inline Matrix invert_for_key(const Matrix& z0, const WatermarkKey& key,
                             const std::vector<std::size_t>& ascending) {
  const auto pred = key.make_predictor();
  return ddim_invert(z0, ascending, *pred, key.schedule, key.eta);
}

inline Matrix sample_for_key(const Matrix& z_t, const WatermarkKey& key,
                             const std::vector<std::size_t>& ascending) {
  const auto pred = key.make_predictor();
  return ddim_sample(z_t, descending(ascending), *pred, key.schedule, key.eta);
}

/// invert -> embed both layers -> sample, for one whitened grid.
inline Matrix watermark_grid(const Matrix& z0, const WatermarkKey& key) {
  const auto steps = key.embed_schedule();
  const Matrix z_t = invert_for_key(z0, key, steps);
  return sample_for_key(embed_layers(z_t, key.signature(), key.mask), key, steps);
}

struct RedundantEmbedResult {
  Matrix entities;
  CommunityPartition partition;
  std::vector<std::optional<std::size_t>> key_used;  ///< per community
};

/// Watermarks the selected communities (all when `selected` is empty). Rows of other
/// communities are copied unchanged.
inline RedundantEmbedResult redundant_embed(const KnowledgeGraph& g, const Matrix& entities,
                                            const std::vector<WatermarkKey>& ring,
                                            const std::vector<std::size_t>& selected = {}) {
  if (ring.empty()) throw ConfigError("redundant_embed: empty key ring");
  if (static_cast<std::size_t>(entities.rows()) != g.n_entities())
    throw ShapeError("redundant_embed: embedding rows do not match entity count");
  RedundantEmbedResult out;
  out.entities = entities;
  out.partition = partition_communities(g, ring_community_size(ring));
  const auto grids = community_grids(out.partition, entities);
  out.key_used.assign(grids.size(), std::nullopt);
  std::vector<bool> chosen(grids.size(), selected.empty());
  for (std::size_t c : selected) {
    if (c >= grids.size()) throw IndexError("redundant_embed: community index out of range");
    chosen[c] = true;
  }
  std::vector<Matrix> blocks(grids.size());
  parallel_for(grids.size(), [&](std::size_t c) {
    if (!chosen[c]) return;
    const auto& lg = grids[c].grid;
    const auto k = find_key(ring, lg.rows(), lg.cols());
    if (!k)
      throw ShapeError("redundant_embed: no key for community grid " +
                       shape_str(lg.rows(), lg.cols()));
    out.key_used[c] = k;
    blocks[c] = decode_with(watermark_grid(lg.data, ring[*k]), lg.stats);
  });
  for (std::size_t c = 0; c < grids.size(); ++c) {
    if (!chosen[c]) continue;
    const auto& members = grids[c].grid.entity_order;
    for (std::size_t i = 0; i < members.size(); ++i)
      out.entities.row(members[i]) = blocks[c].row(static_cast<Eigen::Index>(i));
  }
  return out;
}

struct CommunityDetection {
  std::size_t community_id = 0;
  std::size_t key_index = 0;
  double sigma2_hat = 0.0;
  bool sigma2_fallback = false;
  std::vector<LayerTest> layers;
  double log_p = 0.0;  ///< layers combined by Bonferroni
  double p_value = 1.0;
};

struct DetectionResult {
  std::vector<CommunityDetection> records;
  double alpha = 0.0;
  double corrected_alpha = 0.0;
  double log_min_p = 0.0;
  double min_p = 1.0;
  bool decision = false;

  /// -log(min p), the detection score used for ROC analysis.
  double score() const { return -log_min_p; }

  json to_json(const std::string& graph_id = {}) const {
    json comms = json::array();
    for (const auto& r : records) {
      json layers = json::array();
      for (const auto& l : r.layers)
        layers.push_back({{"layer", l.layer},
                          {"t_hat", l.t_hat},
                          {"dof", l.dof},
                          {"lambda", l.lambda},
                          {"p", l.p_value},
                          {"log_p", l.log_p}});
      json best = layers.empty() ? json::object() : layers[0];
      for (const auto& l : layers)
        if (l.at("log_p").get<double>() < best.at("log_p").get<double>()) best = l;
      comms.push_back({{"id", r.community_id},
                       {"key", r.key_index},
                       {"t_hat", best.value("t_hat", 0.0)},
                       {"dof", best.value("dof", 0)},
                       {"lambda", best.value("lambda", 0.0)},
                       {"p", r.p_value},
                       {"log_p", r.log_p},
                       {"sigma2_hat", r.sigma2_hat},
                       {"sigma2_fallback", r.sigma2_fallback},
                       {"layers", layers}});
    }
    return {{"graph_id", graph_id},
            {"alpha", alpha},
            {"corrected_alpha", corrected_alpha},
            {"min_p", min_p},
            {"log_min_p", log_min_p},
            {"communities", comms},
            {"decision", decision}};
  }
};

/// Statistic for one community latent against one key.
inline CommunityDetection detect_grid(const Matrix& z0, const WatermarkKey& key) {
  const Matrix z_t = invert_for_key(z0, key, key.detect_schedule());
  const ComplexMatrix y = extract_spectrum(z_t).values;
  const ComplexMatrix ref = reference_spectrum(key);
  CommunityDetection d;
  const auto est = estimate_sigma2(y, key.mask);
  d.sigma2_hat = est.sigma2;
  d.sigma2_fallback = est.fallback;
  const auto layers = split_layers(key.mask);
  if (layers.phi.count() > 0) d.layers.push_back(layer_test("phi", y, ref, layers.phi, est.sigma2));
  if (layers.psi.count() > 0) d.layers.push_back(layer_test("psi", y, ref, layers.psi, est.sigma2));
  double best = 0.0;
  for (const auto& l : d.layers) best = std::min(best, l.log_p);
  d.log_p = std::min(0.0, best + std::log(static_cast<double>(std::max<std::size_t>(d.layers.size(), 1))));
  d.p_value = std::exp(d.log_p);
  return d;
}

/// align -> partition -> encode -> invert -> extract -> per (key, community) p-values.
/// Decision: min p below alpha / (n_keys * n_communities).
inline DetectionResult detect(const KnowledgeGraph& g, const Matrix& entities,
                              const std::vector<WatermarkKey>& ring, double alpha) {
  if (ring.empty()) throw ConfigError("detect: empty key ring");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("detect: alpha must lie in (0, 1)");
  if (static_cast<std::size_t>(entities.rows()) != g.n_entities())
    throw ShapeError("detect: embedding rows do not match entity count");
  const auto part = partition_communities(g, ring_community_size(ring));
  const auto grids = community_grids(part, entities);

  std::vector<std::pair<std::size_t, std::size_t>> jobs;  // (community, key)
  for (std::size_t c = 0; c < grids.size(); ++c)
    for (std::size_t k = 0; k < ring.size(); ++k)
      if (ring[k].m() == grids[c].grid.rows() && ring[k].n() == grids[c].grid.cols())
        jobs.push_back({c, k});

  DetectionResult res;
  res.alpha = alpha;
  res.corrected_alpha = alpha / static_cast<double>(ring.size() * grids.size());
  res.records.resize(jobs.size());
  parallel_for(jobs.size(), [&](std::size_t i) {
    const auto [c, k] = jobs[i];
    res.records[i] = detect_grid(grids[c].grid.data, ring[k]);
    res.records[i].community_id = c;
    res.records[i].key_index = k;
  });
  res.log_min_p = 0.0;
  for (const auto& r : res.records) res.log_min_p = std::min(res.log_min_p, r.log_p);
  res.min_p = std::exp(res.log_min_p);
  res.decision = res.log_min_p < std::log(res.corrected_alpha);
  return res;
}

struct KeyRingConfig {
  std::uint64_t seed = 1;
  double sigma2 = 1.0;
  double density = 0.015;
  std::size_t community_size = 100;
  std::size_t embed_steps = 75;
  std::size_t detect_steps = 75;
  double alpha_correction = 0.05;
  NoiseSchedule schedule = NoiseSchedule::linear(75);
  std::string predictor = "linear";  ///< "linear" (pretrained) or "zero"
  double eta = 1.0;
  std::size_t keys_per_shape = 1;  ///< extra keys are decoys; the first one per shape embeds
};

/// Distinct grid shapes of a partition, in community order.
inline std::vector<std::pair<Eigen::Index, Eigen::Index>> grid_shapes(const CommunityPartition& p,
                                                                      Eigen::Index dim) {
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes;
  for (const auto& c : p.communities) {
    const std::pair<Eigen::Index, Eigen::Index> s{static_cast<Eigen::Index>(c.size()), dim};
    if (std::find(shapes.begin(), shapes.end(), s) == shapes.end()) shapes.push_back(s);
  }
  return shapes;
}

/// Key for one grid shape, with a seeded random layered mask. `index` > 0 yields further
/// independent keys of the same shape.
inline WatermarkKey make_key(const KeyRingConfig& cfg, Eigen::Index m, Eigen::Index n, std::size_t index = 0) {
  WatermarkKey k;
  k.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(m) * 1000003ULL + static_cast<std::uint64_t>(n));
  if (index > 0) k.seed = derive_seed(k.seed, static_cast<std::uint64_t>(index));
  k.sigma2 = cfg.sigma2;
  k.mask = random_layered_mask(m, n, cfg.density, k.seed);
  k.schedule = cfg.schedule;
  k.embed_steps = cfg.embed_steps;
  k.detect_steps = cfg.detect_steps;
  k.alpha_correction = cfg.alpha_correction;
  k.community_size = cfg.community_size;
  k.eta = cfg.eta;
  if (cfg.predictor == "linear") {
    k.predictor = LinearPredictor::pretrained(cfg.schedule, m, n, derive_seed(cfg.seed, "pretrained")).to_json();
  } else if (cfg.predictor == "zero") {
    k.predictor = ZeroPredictor{}.to_json();
  } else {
    throw ConfigError("unknown predictor '" + cfg.predictor + "'");
  }
  k.validate();
  return k;
}

inline std::vector<WatermarkKey> make_key_ring(const KnowledgeGraph& g, Eigen::Index dim,
                                               const KeyRingConfig& cfg) {
  const auto part = partition_communities(g, cfg.community_size);
  if (cfg.keys_per_shape < 1) throw ConfigError("keys_per_shape must be >= 1");
  std::vector<WatermarkKey> ring;
  for (auto [m, n] : grid_shapes(part, dim))
    for (std::size_t i = 0; i < cfg.keys_per_shape; ++i) ring.push_back(make_key(cfg, m, n, i));
  return ring;
}

}  // namespace kgmark
