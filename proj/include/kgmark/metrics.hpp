#pragma once

#include "kgmark/kg_model.hpp"

#include <functional>
#include <numeric>

namespace kgmark {

/// Mann-Whitney form of the ROC area: P(pos > neg) + 0.5 P(pos == neg).
inline double auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  if (pos.empty() || neg.empty()) throw ConfigError("auc: both score sets must be non-empty");
  std::vector<double> sorted_neg = neg;
  std::sort(sorted_neg.begin(), sorted_neg.end());
  double wins = 0.0;
  for (double p : pos) {
    const auto lo = std::lower_bound(sorted_neg.begin(), sorted_neg.end(), p);
    const auto hi = std::upper_bound(lo, sorted_neg.end(), p);
    wins += static_cast<double>(lo - sorted_neg.begin()) + 0.5 * static_cast<double>(hi - lo);
  }
  return wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

/// TPR at the strictest threshold whose false-positive fraction (score > threshold) is <= fpr.
inline double tpr_at_fpr(const std::vector<double>& pos, const std::vector<double>& neg, double fpr) {
  if (pos.empty() || neg.empty()) throw ConfigError("tpr_at_fpr: both score sets must be non-empty");
  if (!(fpr >= 0.0 && fpr < 1.0)) throw ConfigError("tpr_at_fpr: fpr must lie in [0, 1)");
  std::vector<double> desc = neg;
  std::sort(desc.begin(), desc.end(), std::greater<>());
  const auto allowed = static_cast<std::size_t>(std::floor(fpr * static_cast<double>(neg.size()) + 1e-12));
  const double threshold = desc[std::min(allowed, desc.size() - 1)];
  const auto hits = std::count_if(pos.begin(), pos.end(), [&](double p) { return p > threshold; });
  return static_cast<double>(hits) / static_cast<double>(pos.size());
}

inline double cosine_similarity(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "cosine_similarity");
  const double na = a.norm(), nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) throw NumericError("cosine_similarity: zero-norm input");
  return (a.array() * b.array()).sum() / (na * nb);
}

struct RankMetrics {
  double gmr = 0.0;
  double hmr = 0.0;
  double amr = 0.0;
  double hits_at_k = 0.0;
  std::size_t k = 10;
};

inline RankMetrics rank_metrics(const std::vector<std::size_t>& ranks, std::size_t k = 10) {
  if (ranks.empty()) throw ConfigError("rank_metrics: empty rank list");
  RankMetrics m;
  m.k = k;
  double log_sum = 0.0, inv_sum = 0.0, sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t r : ranks) {
    if (r < 1) throw ConfigError("rank_metrics: ranks are 1-based");
    const double x = static_cast<double>(r);
    log_sum += std::log(x);
    inv_sum += 1.0 / x;
    sum += x;
    if (r <= k) ++hits;
  }
  const double n = static_cast<double>(ranks.size());
  m.gmr = std::exp(log_sum / n);
  m.hmr = n / inv_sum;
  m.amr = sum / n;
  m.hits_at_k = static_cast<double>(hits) / n;
  return m;
}

/// Filtered head and tail ranks for every triple in `test`.
inline std::vector<std::size_t> link_prediction_ranks(const KnowledgeGraph& kg, const EmbeddingMatrix& emb,
                                                      const std::vector<Triple>& test) {
  std::vector<std::size_t> ranks;
  ranks.reserve(2 * test.size());
  for (const Triple& t : test) {
    ranks.push_back(rank_entity(kg, emb, t, RankMode::head, true));
    ranks.push_back(rank_entity(kg, emb, t, RankMode::tail, true));
  }
  return ranks;
}

/// Average ranks (ties share the mean rank), 1-based.
inline std::vector<double> fractional_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("spearman: need two equal-length series");
  const auto rx = fractional_ranks(x), ry = fractional_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace kgmark
