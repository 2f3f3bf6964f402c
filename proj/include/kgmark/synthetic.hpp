#pragma once

#include "kgmark/io.hpp"
#include "kgmark/kg_model.hpp"

namespace kgmark {

/// Degree-corrected stochastic block model with typed, directed triples. Vertex weights
/// follow a Pareto law so the degree sequence is heavy-tailed; relation ids depend on the
/// block pair plus a seeded coin so the KGE has structure to learn.
struct SbmConfig {
  std::size_t n_entities = 500;
  std::size_t n_blocks = 5;
  std::size_t n_relations = 8;
  double mean_degree = 10.0;
  double p_in_ratio = 8.0;  ///< within-block vs across-block affinity
  double pareto_shape = 2.2;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_entities < 2) throw ConfigError("sbm: need at least 2 entities");
    if (n_blocks < 1 || n_blocks > n_entities) throw ConfigError("sbm: bad block count");
    if (n_relations < 1) throw ConfigError("sbm: need at least one relation");
    if (!(mean_degree > 0.0)) throw ConfigError("sbm: mean degree must be > 0");
    if (!(p_in_ratio >= 1.0)) throw ConfigError("sbm: p_in_ratio must be >= 1");
    if (!(pareto_shape > 1.0)) throw ConfigError("sbm: pareto shape must be > 1");
  }

  json to_json() const {
    return {{"n_entities", n_entities}, {"n_blocks", n_blocks},     {"n_relations", n_relations},
            {"mean_degree", mean_degree}, {"p_in_ratio", p_in_ratio}, {"pareto_shape", pareto_shape},
            {"seed", seed}};
  }

  static SbmConfig from_json(const json& j) {
    SbmConfig c;
    try {
      c.n_entities = j.value("n_entities", c.n_entities);
      c.n_blocks = j.value("n_blocks", c.n_blocks);
      c.n_relations = j.value("n_relations", c.n_relations);
      c.mean_degree = j.value("mean_degree", c.mean_degree);
      c.p_in_ratio = j.value("p_in_ratio", c.p_in_ratio);
      c.pareto_shape = j.value("pareto_shape", c.pareto_shape);
      c.seed = j.value("seed", c.seed);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("sbm config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

struct SyntheticGraph {
  KnowledgeGraph graph;
  std::vector<std::size_t> block;  ///< entity -> block
};

inline SyntheticGraph generate_sbm(const SbmConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, "sbm"));
  const std::size_t n = cfg.n_entities;
  std::vector<std::size_t> block(n);
  std::vector<double> theta(n);
  for (std::size_t v = 0; v < n; ++v) {
    block[v] = v % cfg.n_blocks;
    theta[v] = std::pow(1.0 - rng.uniform(), -1.0 / cfg.pareto_shape);
  }
  // Expected degree of v ~ theta_v * scale * sum_u theta_u * affinity(v, u).
  const double nb = static_cast<double>(cfg.n_blocks);
  const double mean_aff = (cfg.p_in_ratio + (nb - 1.0)) / nb;
  double sum_theta = 0.0;
  for (double t : theta) sum_theta += t;
  const double mean_theta = sum_theta / static_cast<double>(n);
  const double scale = cfg.mean_degree / (mean_theta * sum_theta * mean_aff);

  // each block pair prefers two relations
  std::vector<Triple> triples;
  for (EntityId u = 0; u < n; ++u)
    for (EntityId v = u + 1; v < n; ++v) {
      const double aff = block[u] == block[v] ? cfg.p_in_ratio : 1.0;
      const double p = std::min(1.0, scale * theta[u] * theta[v] * aff);
      if (rng.uniform() >= p) continue;
      const std::size_t bu = block[u], bv = block[v];
      const std::size_t base = (bu * cfg.n_blocks + bv) * 2;
      const auto rel = static_cast<RelationId>((base + rng.index(2)) % cfg.n_relations);
      if (rng.uniform() < 0.5) {
        triples.push_back({u, rel, v});
      } else {
        triples.push_back({v, rel, u});
      }
    }
  if (triples.empty()) throw EmptyGraphError("sbm: generated graph has no triples");
  std::vector<std::string> ent(n), rel(cfg.n_relations);
  for (std::size_t v = 0; v < n; ++v) ent[v] = "e" + std::to_string(v);
  for (std::size_t r = 0; r < cfg.n_relations; ++r) rel[r] = "r" + std::to_string(r);
  return {KnowledgeGraph(n, cfg.n_relations, std::move(triples), std::move(ent), std::move(rel)),
          std::move(block)};
}

}  // namespace kgmark
