#pragma once

#include "kgmark/io.hpp"

#include <map>
#include <numeric>
#include <set>

namespace kgmark {

inline std::size_t triangles_through(const KnowledgeGraph& g, EntityId v) {
  const auto& nv = g.neighbors(v);
  std::size_t t = 0;
  for (std::size_t a = 0; a < nv.size(); ++a) {
    const auto& na = g.neighbors(nv[a]);
    for (std::size_t b = a + 1; b < nv.size(); ++b)
      if (std::binary_search(na.begin(), na.end(), nv[b])) ++t;
  }
  return t;
}

/// 2 T(v) / (d (d - 1)), 0 when d < 2.
inline double clustering_coefficient(const KnowledgeGraph& g, EntityId v) {
  const std::size_t d = g.degree(v);
  if (d < 2) return 0.0;
  return 2.0 * static_cast<double>(triangles_through(g, v)) /
         (static_cast<double>(d) * static_cast<double>(d - 1));
}

/// Degree centrality deg(v) / (|V| - 1).
inline double centrality(const KnowledgeGraph& g, EntityId v) {
  g.check_entity(v);
  if (g.n_entities() < 2) return 0.0;
  return static_cast<double>(g.degree(v)) / static_cast<double>(g.n_entities() - 1);
}

struct AlignedOrder {
  std::vector<EntityId> order;        ///< position -> entity
  std::vector<std::size_t> position;  ///< entity -> position
  std::vector<std::size_t> degree;    ///< per entity
  std::vector<double> clustering;     ///< per entity

  std::size_t size() const { return order.size(); }
};

namespace detail {

/// Replace colors by the rank of (color, key) in sorted order. Returns the number of colors.
template <typename Key>
std::size_t recolor(std::vector<std::uint32_t>& colors, const std::vector<Key>& keys) {
  const std::size_t n = colors.size();
  std::vector<std::uint32_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0u);
  std::sort(idx.begin(), idx.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (colors[a] != colors[b]) return colors[a] < colors[b];
    return keys[a] < keys[b];
  });
  std::vector<std::uint32_t> out(n);
  std::uint32_t c = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (k > 0 && (colors[idx[k]] != colors[idx[k - 1]] || keys[idx[k]] != keys[idx[k - 1]])) ++c;
    out[idx[k]] = c;
  }
  colors = std::move(out);
  return n == 0 ? 0 : c + 1;
}

/// Iterated neighbour-multiset refinement until the number of cells stops growing.
inline void refine(const KnowledgeGraph& g, std::vector<std::uint32_t>& colors) {
  const std::size_t n = colors.size();
  std::size_t cells = std::set<std::uint32_t>(colors.begin(), colors.end()).size();
  while (true) {
    std::vector<std::vector<std::uint32_t>> keys(n);
    for (EntityId v = 0; v < n; ++v) {
      for (EntityId u : g.neighbors(v)) keys[v].push_back(colors[u]);
      std::sort(keys[v].begin(), keys[v].end());
    }
    const std::size_t next = recolor(colors, keys);
    if (next == cells) return;
    cells = next;
  }
}

}  // namespace detail

/// Canonical vertex order: degree descending, clustering coefficient descending,
/// then a WL round over sorted neighbour (degree, clustering) pairs, then colour
/// refinement to a fixpoint. Cells that stay non-singleton are split by
/// individualizing their lowest-index vertex and refining again.
inline AlignedOrder align_graph(const KnowledgeGraph& g) {
  const std::size_t n = g.n_entities();
  AlignedOrder out;
  out.degree.resize(n);
  out.clustering.resize(n);
  for (EntityId v = 0; v < n; ++v) {
    out.degree[v] = g.degree(v);
    out.clustering[v] = clustering_coefficient(g, v);
  }

  using Feature = std::pair<std::int64_t, double>;  // (-degree, -clustering): ascending = wanted order
  std::vector<Feature> feature(n);
  for (EntityId v = 0; v < n; ++v)
    feature[v] = {-static_cast<std::int64_t>(out.degree[v]), -out.clustering[v]};

  std::vector<std::uint32_t> colors(n, 0);
  detail::recolor(colors, feature);

  std::vector<std::vector<Feature>> wl(n);
  for (EntityId v = 0; v < n; ++v) {
    for (EntityId u : g.neighbors(v)) wl[v].push_back(feature[u]);
    std::sort(wl[v].begin(), wl[v].end());
  }
  detail::recolor(colors, wl);
  detail::refine(g, colors);

  while (true) {
    std::vector<std::size_t> cell_size(n, 0);
    for (auto c : colors) ++cell_size[c];
    std::uint32_t target = 0;
    bool found = false;
    for (std::uint32_t c = 0; c < n; ++c)
      if (cell_size[c] > 1) {
        target = c;
        found = true;
        break;
      }
    if (!found) break;
    EntityId pick = 0;
    for (EntityId v = 0; v < n; ++v)
      if (colors[v] == target) {
        pick = v;
        break;
      }
    std::vector<std::uint8_t> key(n, 1);
    key[pick] = 0;
    detail::recolor(colors, key);
    detail::refine(g, colors);
  }

  out.order.resize(n);
  out.position.resize(n);
  for (EntityId v = 0; v < n; ++v) {
    out.order[colors[v]] = v;
    out.position[v] = colors[v];
  }
  return out;
}

/// Dense 0/1 adjacency with rows and columns in aligned order.
inline Matrix aligned_adjacency(const KnowledgeGraph& g, const AlignedOrder& order) {
  const auto n = static_cast<Eigen::Index>(g.n_entities());
  Matrix a = Matrix::Zero(n, n);
  for (EntityId v = 0; v < g.n_entities(); ++v)
    for (EntityId u : g.neighbors(v))
      a(static_cast<Eigen::Index>(order.position[v]), static_cast<Eigen::Index>(order.position[u])) = 1.0;
  return a;
}

inline Matrix adjacency_matrix(const KnowledgeGraph& g) {
  const auto n = static_cast<Eigen::Index>(g.n_entities());
  Matrix a = Matrix::Zero(n, n);
  for (EntityId v = 0; v < g.n_entities(); ++v)
    for (EntityId u : g.neighbors(v)) a(v, u) = 1.0;
  return a;
}

/// Embedding rows gathered in aligned order.
inline Matrix reorder_rows(const Matrix& rows, const std::vector<EntityId>& order) {
  Matrix out(static_cast<Eigen::Index>(order.size()), rows.cols());
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (order[i] >= rows.rows()) throw IndexError("reorder_rows: entity out of range");
    out.row(static_cast<Eigen::Index>(i)) = rows.row(order[i]);
  }
  return out;
}

struct CommunityPartition {
  std::size_t s = 0;                               ///< nominal community size
  std::vector<std::vector<EntityId>> communities;  ///< each in aligned order
  std::vector<std::size_t> assignment;             ///< entity -> community

  std::size_t l() const { return communities.size(); }

  json to_json() const { return {{"s", s}, {"l", l()}, {"communities", communities}}; }
};

/// Contiguous chunks of the aligned order; l = floor(|V|/s), remainder joins the last chunk.
inline CommunityPartition partition_communities(const AlignedOrder& order, std::size_t s) {
  const std::size_t n = order.size();
  if (s < 2) throw ConfigError("community size must be >= 2");
  if (s > n)
    throw ConfigError("community size " + std::to_string(s) + " exceeds vertex count " +
                      std::to_string(n));
  CommunityPartition p;
  p.s = s;
  const std::size_t l = n / s;
  p.communities.resize(l);
  p.assignment.resize(n);
  for (std::size_t pos = 0; pos < n; ++pos) {
    const std::size_t c = std::min(pos / s, l - 1);
    p.communities[c].push_back(order.order[pos]);
    p.assignment[order.order[pos]] = c;
  }
  return p;
}

inline CommunityPartition partition_communities(const KnowledgeGraph& g, std::size_t s) {
  return partition_communities(align_graph(g), s);
}

struct DivergenceReport {
  double local = 0.0;
  double global = 0.0;
  double alpha_weight = 0.0;
  double total = 0.0;
};

/// Moore-Penrose pseudoinverse of L = D - A; eigenvalues below 1e-10 count as zero.
inline Matrix laplacian_pseudoinverse(const Matrix& adjacency) {
  const Eigen::Index n = adjacency.rows();
  Matrix lap = -adjacency;
  for (Eigen::Index i = 0; i < n; ++i) lap(i, i) += adjacency.row(i).sum();
  const Eigen::MatrixXd dense = lap;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(dense);
  if (es.info() != Eigen::Success) throw NumericError("Laplacian eigendecomposition failed");
  Vector inv = es.eigenvalues();
  for (Eigen::Index i = 0; i < n; ++i) inv(i) = std::abs(inv(i)) < 1e-10 ? 0.0 : 1.0 / inv(i);
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

inline double symmetric_spectral_norm(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(m),
                                                    Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

/// D = ||A - A~||_F + alpha ||L+ - L~+||_2; the smaller graph is padded with isolated vertices.
inline DivergenceReport divergence(const Matrix& a, const Matrix& b, double alpha_weight) {
  if (a.rows() != a.cols() || b.rows() != b.cols()) throw ShapeError("divergence: square adjacency expected");
  const Eigen::Index n = std::max(a.rows(), b.rows());
  Matrix pa = Matrix::Zero(n, n), pb = Matrix::Zero(n, n);
  pa.topLeftCorner(a.rows(), a.cols()) = a;
  pb.topLeftCorner(b.rows(), b.cols()) = b;
  DivergenceReport r;
  r.alpha_weight = alpha_weight;
  if (pa == pb) return r;
  r.local = (pa - pb).norm();
  const Matrix diff = laplacian_pseudoinverse(pa) - laplacian_pseudoinverse(pb);
  r.global = symmetric_spectral_norm(0.5 * (diff + diff.transpose()));
  r.total = r.local + alpha_weight * r.global;
  return r;
}

inline DivergenceReport divergence(const KnowledgeGraph& g, const KnowledgeGraph& h,
                                   double alpha_weight) {
  return divergence(adjacency_matrix(g), adjacency_matrix(h), alpha_weight);
}

}  // namespace kgmark
