#pragma once

#include "kgmark/core.hpp"

#include <compare>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace kgmark {

struct Triple {
  EntityId head = 0;
  RelationId relation = 0;
  EntityId tail = 0;

  auto operator<=>(const Triple&) const = default;
};

struct EmptyGraphError : ParseError {
  using ParseError::ParseError;
};

/// Entities, typed relations and triples, plus an undirected simple-graph view
/// (relation labels and direction dropped, no self loops) for structural ops.
class KnowledgeGraph {
 public:
  KnowledgeGraph() = default;

  KnowledgeGraph(std::size_t n_entities, std::size_t n_relations, std::vector<Triple> triples,
                 std::vector<std::string> entity_labels = {},
                 std::vector<std::string> relation_labels = {})
      : n_entities_(n_entities),
        n_relations_(n_relations),
        entity_labels_(std::move(entity_labels)),
        relation_labels_(std::move(relation_labels)) {
    if (!entity_labels_.empty() && entity_labels_.size() != n_entities_)
      throw ConfigError("KnowledgeGraph: entity label count does not match entity count");
    if (!relation_labels_.empty() && relation_labels_.size() != n_relations_)
      throw ConfigError("KnowledgeGraph: relation label count does not match relation count");
    const long double capacity = static_cast<long double>(n_entities_) * n_entities_ *
                                 static_cast<long double>(std::max<std::size_t>(n_relations_, 1));
    if (capacity >= 1.8e19L) throw ConfigError("KnowledgeGraph: too large for triple index");

    triples_.reserve(triples.size());
    for (const Triple& t : triples) {
      if (t.head >= n_entities_ || t.tail >= n_entities_)
        throw IndexError("KnowledgeGraph: entity id out of range");
      if (t.relation >= n_relations_) throw IndexError("KnowledgeGraph: relation id out of range");
      if (index_.insert(key(t)).second) {
        triples_.push_back(t);
      } else {
        ++duplicates_dropped_;
      }
    }
    build_adjacency();
  }

  std::size_t n_entities() const { return n_entities_; }
  std::size_t n_relations() const { return n_relations_; }
  std::size_t n_triples() const { return triples_.size(); }
  const std::vector<Triple>& triples() const { return triples_; }
  std::size_t duplicates_dropped() const { return duplicates_dropped_; }

  bool contains(const Triple& t) const {
    if (t.head >= n_entities_ || t.tail >= n_entities_ || t.relation >= n_relations_) return false;
    return index_.count(key(t)) != 0;
  }

  /// Sorted, duplicate-free undirected neighbours of v.
  const std::vector<EntityId>& neighbors(EntityId v) const {
    check_entity(v);
    return adjacency_[v];
  }

  std::size_t degree(EntityId v) const { return neighbors(v).size(); }

  bool has_edge(EntityId u, EntityId v) const {
    const auto& nu = neighbors(u);
    return std::binary_search(nu.begin(), nu.end(), v);
  }

  std::size_t n_edges() const {
    std::size_t sum = 0;
    for (const auto& n : adjacency_) sum += n.size();
    return sum / 2;
  }

  const std::vector<std::string>& entity_labels() const { return entity_labels_; }
  const std::vector<std::string>& relation_labels() const { return relation_labels_; }

  void check_entity(EntityId v) const {
    if (v >= n_entities_) throw IndexError("entity id " + std::to_string(v) + " out of range");
  }

 private:
  std::uint64_t key(const Triple& t) const {
    return (static_cast<std::uint64_t>(t.head) * n_relations_ + t.relation) * n_entities_ + t.tail;
  }

  void build_adjacency() {
    adjacency_.assign(n_entities_, {});
    for (const Triple& t : triples_) {
      if (t.head == t.tail) continue;
      adjacency_[t.head].push_back(t.tail);
      adjacency_[t.tail].push_back(t.head);
    }
    for (auto& n : adjacency_) {
      std::sort(n.begin(), n.end());
      n.erase(std::unique(n.begin(), n.end()), n.end());
    }
  }

  std::size_t n_entities_ = 0;
  std::size_t n_relations_ = 0;
  std::vector<Triple> triples_;
  std::vector<std::vector<EntityId>> adjacency_;
  std::unordered_set<std::uint64_t> index_;
  std::vector<std::string> entity_labels_;
  std::vector<std::string> relation_labels_;
  std::size_t duplicates_dropped_ = 0;
};

/// Parses head<TAB>relation<TAB>tail lines. Labels get dense ids in order of
/// first appearance (head before tail within a line). Blank lines are skipped.
inline KnowledgeGraph parse_triples(std::istream& in) {
  std::unordered_map<std::string, EntityId> entity_ids;
  std::unordered_map<std::string, RelationId> relation_ids;
  std::vector<std::string> entity_labels;
  std::vector<std::string> relation_labels;
  std::vector<Triple> triples;

  auto intern = [](auto& ids, auto& labels, const std::string& label) {
    auto [it, inserted] = ids.try_emplace(label, static_cast<std::uint32_t>(labels.size()));
    if (inserted) labels.push_back(label);
    return it->second;
  };

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 3 || fields[0].empty() || fields[1].empty() || fields[2].empty()) {
      throw ParseError("line " + std::to_string(line_no) +
                       ": expected head<TAB>relation<TAB>tail, got " +
                       std::to_string(fields.size()) + " field(s)");
    }
    const EntityId h = intern(entity_ids, entity_labels, fields[0]);
    const RelationId r = intern(relation_ids, relation_labels, fields[1]);
    const EntityId t = intern(entity_ids, entity_labels, fields[2]);
    triples.push_back({h, r, t});
  }
  if (triples.empty()) throw EmptyGraphError("triples input contains no triples");
  const std::size_t ne = entity_labels.size();
  const std::size_t nr = relation_labels.size();
  return KnowledgeGraph(ne, nr, std::move(triples), std::move(entity_labels),
                        std::move(relation_labels));
}

inline KnowledgeGraph load_triples(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open triples file: " + path);
  return parse_triples(in);
}

/// Writes the graph back as TSV using its labels (or numeric ids when unlabeled).
inline void save_triples(const KnowledgeGraph& kg, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write triples file: " + path);
  const auto& el = kg.entity_labels();
  const auto& rl = kg.relation_labels();
  for (const Triple& t : kg.triples()) {
    auto ent = [&](EntityId e) { return el.empty() ? std::to_string(e) : el[e]; };
    out << ent(t.head) << '\t' << (rl.empty() ? std::to_string(t.relation) : rl[t.relation])
        << '\t' << ent(t.tail) << '\n';
  }
}

/// Entity rows hold dim/2 complex numbers interleaved as (re, im); relations are
/// unit-modulus rotations stored as phases in [-pi, pi).
struct EmbeddingMatrix {
  Matrix entities;
  Matrix relation_phases;

  std::size_t n_entities() const { return static_cast<std::size_t>(entities.rows()); }
  std::size_t n_relations() const { return static_cast<std::size_t>(relation_phases.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(entities.cols()); }

  void validate() const {
    if (entities.cols() % 2 != 0) throw ConfigError("embedding dimension must be even");
    if (relation_phases.rows() > 0 && relation_phases.cols() * 2 != entities.cols())
      throw ShapeError("relation phases must have dim/2 columns");
    if (!all_finite(entities) || !all_finite(relation_phases))
      throw NumericError("embedding contains non-finite values");
  }
};

inline double wrap_phase(double theta) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double w = theta - two_pi * std::floor((theta + std::numbers::pi) / two_pi);
  if (w >= std::numbers::pi) w -= two_pi;
  return w;
}

/// -|| h o r - t ||_2 over the complex components; higher is more plausible.
inline double rotate_score(const EmbeddingMatrix& emb, const Triple& t) {
  if (t.head >= emb.n_entities() || t.tail >= emb.n_entities())
    throw IndexError("rotate_score: entity id out of range");
  if (t.relation >= emb.n_relations()) throw IndexError("rotate_score: relation id out of range");
  const auto h = emb.entities.row(t.head);
  const auto tl = emb.entities.row(t.tail);
  const auto phase = emb.relation_phases.row(t.relation);
  double sq = 0.0;
  for (Eigen::Index k = 0; k < phase.size(); ++k) {
    const double c = std::cos(phase(k));
    const double s = std::sin(phase(k));
    const double re = h(2 * k) * c - h(2 * k + 1) * s - tl(2 * k);
    const double im = h(2 * k) * s + h(2 * k + 1) * c - tl(2 * k + 1);
    sq += re * re + im * im;
  }
  return -std::sqrt(sq);
}

struct RotateConfig {
  std::size_t dim = 64;
  std::size_t epochs = 50;
  double lr = 0.05;
  std::size_t neg_samples = 4;
  double margin = 3.0;
  std::uint64_t seed = 1;
};

struct RotateTraining {
  EmbeddingMatrix embedding;
  std::vector<double> epoch_loss;  ///< mean hinge loss per epoch
};

namespace detail {

/// Distance ||h o r - t|| and its gradients with respect to h, t and the phases.
struct RotateGrad {
  double distance = 0.0;
  Vector d_head, d_tail, d_phase;
};

inline RotateGrad rotate_distance_grad(const EmbeddingMatrix& emb, const Triple& t) {
  const std::size_t half = emb.dim() / 2;
  RotateGrad g;
  g.d_head.resize(static_cast<Eigen::Index>(emb.dim()));
  g.d_tail.resize(static_cast<Eigen::Index>(emb.dim()));
  g.d_phase.resize(static_cast<Eigen::Index>(half));
  std::vector<std::complex<double>> v(half), rot(half), hr(half);
  double sq = 0.0;
  for (std::size_t k = 0; k < half; ++k) {
    const auto ki = static_cast<Eigen::Index>(k);
    const std::complex<double> h(emb.entities(t.head, 2 * ki), emb.entities(t.head, 2 * ki + 1));
    const std::complex<double> tl(emb.entities(t.tail, 2 * ki), emb.entities(t.tail, 2 * ki + 1));
    rot[k] = std::polar(1.0, emb.relation_phases(t.relation, ki));
    hr[k] = h * rot[k];
    v[k] = hr[k] - tl;
    sq += std::norm(v[k]);
  }
  g.distance = std::sqrt(sq);
  const double inv = g.distance > 1e-12 ? 1.0 / g.distance : 0.0;
  for (std::size_t k = 0; k < half; ++k) {
    const auto ki = static_cast<Eigen::Index>(k);
    const std::complex<double> unit = v[k] * inv;
    const std::complex<double> dh = unit * std::conj(rot[k]);
    g.d_head(2 * ki) = dh.real();
    g.d_head(2 * ki + 1) = dh.imag();
    g.d_tail(2 * ki) = -unit.real();
    g.d_tail(2 * ki + 1) = -unit.imag();
    g.d_phase(ki) = -(std::conj(unit) * hr[k]).imag();
  }
  return g;
}

}  // namespace detail

/// Margin-ranking RotatE with uniform negative sampling and plain SGD.
inline RotateTraining train_rotate(const KnowledgeGraph& kg, const RotateConfig& cfg) {
  if (cfg.dim == 0 || cfg.dim % 2 != 0) throw ConfigError("train_rotate: dim must be even and > 0");
  if (cfg.epochs < 1) throw ConfigError("train_rotate: epochs must be >= 1");
  if (cfg.neg_samples < 1) throw ConfigError("train_rotate: neg_samples must be >= 1");
  if (!(cfg.lr > 0.0) || !(cfg.margin > 0.0))
    throw ConfigError("train_rotate: lr and margin must be positive");
  if (kg.n_entities() < 2 || kg.n_triples() == 0)
    throw ConfigError("train_rotate: graph needs at least 2 entities and 1 triple");

  Rng rng(derive_seed(cfg.seed, "rotate"));
  const auto n = static_cast<Eigen::Index>(kg.n_entities());
  const auto d = static_cast<Eigen::Index>(cfg.dim);
  RotateTraining out;
  EmbeddingMatrix& emb = out.embedding;
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.dim / 2));
  emb.entities.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) emb.entities(i, j) = rng.uniform(-bound, bound);
  emb.relation_phases.resize(static_cast<Eigen::Index>(kg.n_relations()), d / 2);
  for (Eigen::Index i = 0; i < emb.relation_phases.rows(); ++i)
    for (Eigen::Index j = 0; j < d / 2; ++j)
      emb.relation_phases(i, j) = rng.uniform(-std::numbers::pi, std::numbers::pi);

  std::vector<std::size_t> order(kg.n_triples());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t count = 0;
    for (std::size_t idx : order) {
      const Triple pos = kg.triples()[idx];
      for (std::size_t s = 0; s < cfg.neg_samples; ++s) {
        Triple neg = pos;
        const bool corrupt_tail = rng.uniform() < 0.5;
        const auto e = static_cast<EntityId>(rng.index(kg.n_entities()));
        (corrupt_tail ? neg.tail : neg.head) = e;
        ++count;
        if (neg == pos) continue;
        const auto gp = detail::rotate_distance_grad(emb, pos);
        const auto gn = detail::rotate_distance_grad(emb, neg);
        const double hinge = cfg.margin + gp.distance - gn.distance;
        if (hinge <= 0.0) continue;
        loss_sum += hinge;
        emb.entities.row(pos.head) -= cfg.lr * gp.d_head.transpose();
        emb.entities.row(pos.tail) -= cfg.lr * gp.d_tail.transpose();
        emb.entities.row(neg.head) += cfg.lr * gn.d_head.transpose();
        emb.entities.row(neg.tail) += cfg.lr * gn.d_tail.transpose();
        auto phases = emb.relation_phases.row(pos.relation);
        phases -= cfg.lr * (gp.d_phase - gn.d_phase).transpose();
        for (Eigen::Index k = 0; k < phases.size(); ++k) phases(k) = wrap_phase(phases(k));
      }
    }
    out.epoch_loss.push_back(count ? loss_sum / static_cast<double>(count) : 0.0);
  }
  emb.validate();
  return out;
}

enum class RankMode { head, tail };

/// 1 + number of candidates scoring strictly higher than the true entity.
/// Filtered mode skips candidates that form another known triple.
inline std::size_t rank_entity(const KnowledgeGraph& kg, const EmbeddingMatrix& emb,
                               const Triple& t, RankMode mode, bool filtered) {
  if (emb.n_entities() != kg.n_entities())
    throw ShapeError("rank_entity: embedding rows do not match entity count");
  const double target = rotate_score(emb, t);
  std::size_t higher = 0;
  const EntityId truth = mode == RankMode::tail ? t.tail : t.head;
  for (EntityId e = 0; e < kg.n_entities(); ++e) {
    if (e == truth) continue;
    Triple cand = t;
    (mode == RankMode::tail ? cand.tail : cand.head) = e;
    if (filtered && kg.contains(cand)) continue;
    if (rotate_score(emb, cand) > target) ++higher;
  }
  return higher + 1;
}

}  // namespace kgmark
