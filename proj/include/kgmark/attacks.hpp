#pragma once

#include "kgmark/watermark.hpp"

#include <functional>

namespace kgmark {

namespace detail {

inline void check_fraction(double f, const char* what) {
  if (!(f >= 0.0 && f <= 1.0)) throw ConfigError(std::string(what) + " must lie in [0, 1]");
}

inline std::size_t affected_count(double fraction, std::size_t n) {
  return std::min(n, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-12)));
}

/// Sorted seeded subset of ceil(fraction * n) indices.
inline std::vector<std::size_t> affected_subset(double fraction, std::size_t n, Rng& rng) {
  auto idx = rng.sample_without_replacement(n, affected_count(fraction, n));
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline KnowledgeGraph with_triples(const KnowledgeGraph& g, std::vector<Triple> triples) {
  return KnowledgeGraph(g.n_entities(), g.n_relations(), std::move(triples), g.entity_labels(),
                        g.relation_labels());
}

}  // namespace detail

inline Matrix gaussian_noise(const Matrix& emb, double intensity, double noise_sigma,
                             std::uint64_t seed) {
  detail::check_fraction(intensity, "noise intensity");
  if (noise_sigma < 0.0) throw ConfigError("noise sigma must be >= 0");
  Rng rng(derive_seed(seed, "gaussian-noise"));
  Matrix out = emb;
  for (std::size_t r : detail::affected_subset(intensity, static_cast<std::size_t>(emb.rows()), rng))
    for (Eigen::Index j = 0; j < emb.cols(); ++j)
      out(static_cast<Eigen::Index>(r), j) += noise_sigma * rng.normal();
  return out;
}

/// Population std of all embedding entries; noise defaults are relative to it.
inline double embedding_std(const Matrix& emb) {
  const double mean = emb.mean();
  return std::sqrt((emb.array() - mean).square().mean());
}

/// Selected rows become (1 - w) self + w mean(neighbour rows); isolated rows stay.
inline Matrix smoothing(const Matrix& emb, const KnowledgeGraph& g, double intensity, double weight,
                        std::uint64_t seed) {
  detail::check_fraction(intensity, "smoothing intensity");
  detail::check_fraction(weight, "smoothing weight");
  if (static_cast<std::size_t>(emb.rows()) != g.n_entities())
    throw ShapeError("smoothing: embedding rows do not match entity count");
  Rng rng(derive_seed(seed, "smoothing"));
  Matrix out = emb;
  for (std::size_t r : detail::affected_subset(intensity, g.n_entities(), rng)) {
    const auto& nb = g.neighbors(r);
    if (nb.empty()) continue;
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(emb.cols());
    for (EntityId u : nb) mean += emb.row(u);
    mean /= static_cast<double>(nb.size());
    out.row(static_cast<Eigen::Index>(r)) = (1.0 - weight) * emb.row(static_cast<Eigen::Index>(r)) + weight * mean;
  }
  return out;
}

/// ceil(fraction * |triples|) triples get a different, uniformly drawn relation. A relabel
/// that lands on an existing triple merges with it.
inline KnowledgeGraph relation_alteration(const KnowledgeGraph& g, double fraction,
                                          std::uint64_t seed) {
  detail::check_fraction(fraction, "alteration fraction");
  const std::size_t count = detail::affected_count(fraction, g.n_triples());
  if (count == 0) return g;
  if (g.n_relations() < 2) throw ConfigError("relation_alteration: no alternative relation");
  Rng rng(derive_seed(seed, "relation-alteration"));
  auto triples = g.triples();
  for (std::size_t i : detail::affected_subset(fraction, triples.size(), rng)) {
    auto r = static_cast<RelationId>(rng.index(g.n_relations() - 1));
    if (r >= triples[i].relation) ++r;
    triples[i].relation = r;
  }
  return detail::with_triples(g, std::move(triples));
}

/// Removes ceil(fraction * |triples|) triples; every entity is kept.
inline KnowledgeGraph triple_deletion(const KnowledgeGraph& g, double fraction, std::uint64_t seed) {
  detail::check_fraction(fraction, "deletion fraction");
  Rng rng(derive_seed(seed, "triple-deletion"));
  const auto drop = detail::affected_subset(fraction, g.n_triples(), rng);
  std::vector<Triple> kept;
  std::size_t d = 0;
  for (std::size_t i = 0; i < g.n_triples(); ++i) {
    if (d < drop.size() && drop[d] == i) {
      ++d;
      continue;
    }
    kept.push_back(g.triples()[i]);
  }
  return detail::with_triples(g, std::move(kept));
}

/// Removes every triple with both endpoints inside `members`.
inline KnowledgeGraph community_deletion(const KnowledgeGraph& g, const std::vector<EntityId>& members) {
  std::vector<bool> inside(g.n_entities(), false);
  for (EntityId v : members) {
    g.check_entity(v);
    inside[v] = true;
  }
  std::vector<Triple> kept;
  for (const Triple& t : g.triples())
    if (!(inside[t.head] && inside[t.tail])) kept.push_back(t);
  return detail::with_triples(g, std::move(kept));
}

struct PermutedGraph {
  KnowledgeGraph graph;
  Matrix embedding;
  std::vector<EntityId> permutation;  ///< old id -> new id
};

inline PermutedGraph apply_permutation(const KnowledgeGraph& g, const Matrix& emb,
                                       const std::vector<EntityId>& perm) {
  const std::size_t n = g.n_entities();
  if (perm.size() != n) throw ShapeError("permutation size does not match entity count");
  if (static_cast<std::size_t>(emb.rows()) != n)
    throw ShapeError("embedding rows do not match entity count");
  std::vector<bool> seen(n, false);
  for (EntityId p : perm) {
    if (p >= n || seen[p]) throw ConfigError("not a permutation");
    seen[p] = true;
  }
  std::vector<Triple> triples;
  triples.reserve(g.n_triples());
  for (const Triple& t : g.triples()) triples.push_back({perm[t.head], t.relation, perm[t.tail]});
  const auto& old_labels = g.entity_labels();
  std::vector<std::string> labels(old_labels.empty() ? 0 : n);
  Matrix out(emb.rows(), emb.cols());
  for (EntityId v = 0; v < n; ++v) {
    if (!labels.empty()) labels[perm[v]] = old_labels[v];
    out.row(perm[v]) = emb.row(v);
  }
  return {KnowledgeGraph(n, g.n_relations(), std::move(triples), std::move(labels), g.relation_labels()),
          std::move(out), perm};
}

inline std::vector<EntityId> inverse_permutation(const std::vector<EntityId>& perm) {
  std::vector<EntityId> inv(perm.size());
  for (EntityId v = 0; v < perm.size(); ++v) inv[perm[v]] = v;
  return inv;
}

/// Seeded uniform relabelling applied to ids, adjacency and embedding rows together.
inline PermutedGraph isomorphism_variation(const KnowledgeGraph& g, const Matrix& emb,
                                           std::uint64_t seed) {
  std::vector<EntityId> perm(g.n_entities());
  std::iota(perm.begin(), perm.end(), EntityId{0});
  Rng rng(derive_seed(seed, "isomorphism"));
  rng.shuffle(perm);
  return apply_permutation(g, emb, perm);
}

/// One random unit direction per row, scaled to `budget`.
inline Matrix random_row_directions(Eigen::Index rows, Eigen::Index cols, double budget, Rng& rng) {
  Matrix d = rng.normal_matrix(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const double nrm = d.row(i).norm();
    d.row(i) *= nrm > 0.0 ? budget / nrm : 0.0;
  }
  return d;
}

using SurrogateStatistic = std::function<double(const Matrix&)>;

/// Worst of k random per-row perturbations of L2 norm `budget`: the candidate that moves
/// the surrogate statistic furthest from its clean value. `rows` restricts the perturbed
/// rows (empty = all).
inline Matrix l2_embedding_attack(const Matrix& emb, double budget, std::uint64_t seed,
                                  const SurrogateStatistic& statistic, std::size_t k = 16,
                                  const std::vector<std::size_t>& rows = {}) {
  if (budget < 0.0) throw ConfigError("L2 budget must be >= 0");
  if (k < 1) throw ConfigError("L2 attack needs at least one candidate");
  if (budget == 0.0) return emb;
  Rng rng(derive_seed(seed, "l2-attack"));
  const double clean = statistic(emb);
  Matrix best;
  double best_shift = -1.0;
  for (std::size_t c = 0; c < k; ++c) {
    Matrix d = random_row_directions(emb.rows(), emb.cols(), budget, rng);
    if (!rows.empty()) {
      Matrix masked = Matrix::Zero(d.rows(), d.cols());
      for (auto r : rows) masked.row(static_cast<Eigen::Index>(r)) = d.row(static_cast<Eigen::Index>(r));
      d = std::move(masked);
    }
    Matrix cand = emb + d;
    const double shift = std::abs(statistic(cand) - clean);
    if (shift > best_shift) {
      best_shift = shift;
      best = std::move(cand);
    }
  }
  return best;
}

/// Surrogate statistic: summed T-hat over every (key, community) record.
inline SurrogateStatistic detection_statistic(const KnowledgeGraph& g,
                                              std::vector<WatermarkKey> surrogate_ring) {
  return [g, ring = std::move(surrogate_ring)](const Matrix& emb) {
    double s = 0.0;
    for (const auto& r : detect(g, emb, ring, 0.5).records)
      for (const auto& l : r.layers) s += l.t_hat;
    return s;
  };
}

/// Cosine similarity between masked spectrum components of transform(G_w + sum delta) and F(S),
/// plus gamma * sum ||delta_k||_q.
inline double attack_objective(const Matrix& g_w, const std::vector<Matrix>& delta_parts,
                               const Signature& sig, const MaskMatrix& mask, double gamma, int q,
                               const std::function<Matrix(const Matrix&)>& transform = {}) {
  if (q != 1 && q != 2) throw ConfigError("attack objective: q must be 1 or 2");
  Matrix g = g_w;
  double penalty = 0.0;
  for (const auto& d : delta_parts) {
    require_same_shape(g_w, d, "attack_objective delta");
    g += d;
    penalty += q == 1 ? d.cwiseAbs().sum() : d.norm();
  }
  const Matrix z = transform ? transform(g) : g;
  const Vector y = reference_components(fft2(z), mask);
  const Vector s = reference_components(fft2(sig.spatial), mask);
  const double denom = y.norm() * s.norm();
  if (!(denom > 0.0)) throw NumericError("attack objective: zero spectrum on mask");
  return y.dot(s) / denom + gamma * penalty;
}

enum class AttackKind { none, gaussian_noise, smoothing, relation_alteration, triple_deletion, isomorphism, l2_embedding, community_deletion };

inline std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::none: return "none";
    case AttackKind::gaussian_noise: return "gaussian_noise";
    case AttackKind::smoothing: return "smoothing";
    case AttackKind::relation_alteration: return "relation_alteration";
    case AttackKind::triple_deletion: return "triple_deletion";
    case AttackKind::isomorphism: return "isomorphism";
    case AttackKind::l2_embedding: return "l2_embedding";
    case AttackKind::community_deletion: return "community_deletion";
  }
  return "none";
}

inline AttackKind attack_kind_from_string(const std::string& s) {
  for (auto k : {AttackKind::none, AttackKind::gaussian_noise, AttackKind::smoothing,
                 AttackKind::relation_alteration, AttackKind::triple_deletion,
                 AttackKind::isomorphism, AttackKind::l2_embedding, AttackKind::community_deletion})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown attack kind '" + s + "'");
}

struct AttackSpec {
  AttackKind kind = AttackKind::none;
  double intensity = 0.0;
  double noise_sigma_rel = 0.1;  ///< noise sigma as a multiple of the embedding std
  double smoothing_weight = 0.5;
  double l2_budget_rel = 0.1;    ///< per-row L2 budget as a multiple of the mean row norm
  std::size_t community = 0;     ///< community_deletion target
  std::uint64_t seed = 0;

  void validate() const {
    detail::check_fraction(intensity, "attack intensity");
    detail::check_fraction(smoothing_weight, "smoothing weight");
    if (noise_sigma_rel < 0.0) throw ConfigError("noise sigma must be >= 0");
    if (l2_budget_rel < 0.0) throw ConfigError("L2 budget must be >= 0");
  }

  json to_json() const {
    return {{"kind", to_string(kind)},       {"intensity", intensity},
            {"noise_sigma", noise_sigma_rel}, {"smoothing_weight", smoothing_weight},
            {"l2_budget", l2_budget_rel},     {"community", community},
            {"seed", seed}};
  }

  static AttackSpec from_json(const json& j) {
    AttackSpec a;
    try {
      a.kind = attack_kind_from_string(j.at("kind").get<std::string>());
      a.intensity = j.value("intensity", 0.0);
      a.noise_sigma_rel = j.value("noise_sigma", 0.1);
      a.smoothing_weight = j.value("smoothing_weight", 0.5);
      a.l2_budget_rel = j.value("l2_budget", 0.1);
      a.community = j.value("community", std::size_t{0});
      a.seed = j.value("seed", std::uint64_t{0});
    } catch (const json::exception& e) {
      throw ConfigError(std::string("attack spec: ") + e.what());
    }
    a.validate();
    return a;
  }
};

struct AttackedArtifacts {
  KnowledgeGraph graph;
  Matrix embedding;
};

inline double mean_row_norm(const Matrix& emb) {
  return emb.rows() == 0 ? 0.0 : emb.rowwise().norm().mean();
}

/// Applies one attack. `community_size` is needed for community_deletion, `surrogate` for
/// the L2 attack (a key ring unrelated to the one under test).
inline AttackedArtifacts apply_attack(const AttackSpec& spec, const KnowledgeGraph& g,
                                      const Matrix& emb, std::size_t community_size = 0,
                                      const std::vector<WatermarkKey>& surrogate = {}) {
  spec.validate();
  switch (spec.kind) {
    case AttackKind::none:
      return {g, emb};
    case AttackKind::gaussian_noise:
      return {g, gaussian_noise(emb, spec.intensity, spec.noise_sigma_rel * embedding_std(emb), spec.seed)};
    case AttackKind::smoothing:
      return {g, smoothing(emb, g, spec.intensity, spec.smoothing_weight, spec.seed)};
    case AttackKind::relation_alteration:
      return {relation_alteration(g, spec.intensity, spec.seed), emb};
    case AttackKind::triple_deletion:
      return {triple_deletion(g, spec.intensity, spec.seed), emb};
    case AttackKind::isomorphism: {
      auto p = isomorphism_variation(g, emb, spec.seed);
      return {std::move(p.graph), std::move(p.embedding)};
    }
    case AttackKind::l2_embedding: {
      if (surrogate.empty()) throw ConfigError("L2 attack needs a surrogate key ring");
      const double budget = spec.l2_budget_rel * mean_row_norm(emb);
      const auto rows = detail::affected_count(spec.intensity, static_cast<std::size_t>(emb.rows()));
      if (rows == 0 || budget == 0.0) return {g, emb};
      Rng rng(derive_seed(spec.seed, "l2-rows"));
      const auto subset = detail::affected_subset(spec.intensity, static_cast<std::size_t>(emb.rows()), rng);
      return {g, l2_embedding_attack(emb, budget, spec.seed, detection_statistic(g, surrogate), 16, subset)};
    }
    case AttackKind::community_deletion: {
      if (community_size < 2) throw ConfigError("community_deletion needs the community size");
      const auto part = partition_communities(g, community_size);
      if (spec.community >= part.l()) throw IndexError("community_deletion: community out of range");
      return {community_deletion(g, part.communities[spec.community]), emb};
    }
  }
  return {g, emb};
}

}  // namespace kgmark
