#pragma once

#include "kgmark/attacks.hpp"
#include "kgmark/lawmm.hpp"
#include "kgmark/metrics.hpp"
#include "kgmark/synthetic.hpp"

#include <filesystem>
#include <iomanip>
#include <map>
#include <mutex>

namespace kgmark {

/// Validation failures collected together, reported before any compute.
struct ConfigErrors : ConfigError {
  std::vector<std::string> errors;
  explicit ConfigErrors(std::vector<std::string> e) : ConfigError(join(e)), errors(std::move(e)) {}

  static std::string join(const std::vector<std::string>& e) {
    std::string s = "invalid experiment config:";
    for (const auto& x : e) s += "\n  - " + x;
    return s;
  }
};

inline json rotate_config_to_json(const RotateConfig& c) {
  return {{"dim", c.dim},       {"epochs", c.epochs}, {"lr", c.lr},
          {"neg_samples", c.neg_samples}, {"margin", c.margin}, {"seed", c.seed}};
}

struct AttackRowSpec {
  AttackSpec base;  ///< kind and parameters; intensity and seed are set per row/trial
  std::vector<double> intensities{0.0};
};

struct ExperimentConfig {
  std::string dataset = "sbm500";
  std::string method = "kgmark";
  SbmConfig sbm;
  std::string triples_path;  ///< non-empty: load instead of generating
  RotateConfig kge;
  std::string codec = "whitening";
  NoiseSchedule schedule = NoiseSchedule::linear(75);
  std::size_t steps = 75;
  std::size_t detect_steps = 75;
  std::size_t community_size = 100;
  double density = 0.015;
  std::string mask = "random";  ///< "random" or "lawmm"
  std::string predictor = "linear";
  std::size_t key_ring_size = 1;
  std::vector<AttackRowSpec> attacks;
  std::size_t trials = 200;
  double alpha = 5e-5;
  std::uint64_t seed = 1;
  std::vector<std::size_t> cosine_steps{50, 65, 75};
  std::size_t rank_test_triples = 200;
  LawmmConfig lawmm;

  std::vector<std::string> problems() const {
    std::vector<std::string> e;
    if (trials < 1) e.push_back("trials must be >= 1");
    if (!(alpha > 0.0 && alpha < 1.0)) e.push_back("alpha must lie in (0, 1)");
    if (!(density > 0.0 && density < 1.0)) e.push_back("density must lie in (0, 1)");
    if (steps < 1 || steps > schedule.T()) e.push_back("steps must lie in [1, T]");
    if (detect_steps < 1 || detect_steps > schedule.T()) e.push_back("detect_steps must lie in [1, T]");
    for (auto s : cosine_steps)
      if (s < 1 || s > schedule.T()) e.push_back("cosine step " + std::to_string(s) + " outside [1, T]");
    if (cosine_steps.empty()) e.push_back("cosine_steps must not be empty");
    if (community_size < 2) e.push_back("community_size must be >= 2");
    if (codec != "whitening") e.push_back("codec must be 'whitening'");
    if (mask != "random" && mask != "lawmm") e.push_back("mask must be 'random' or 'lawmm'");
    if (predictor != "linear" && predictor != "zero") e.push_back("predictor must be 'linear' or 'zero'");
    if (key_ring_size < 1) e.push_back("key_ring_size must be >= 1");
    if (kge.dim == 0 || kge.dim % 2 != 0) e.push_back("kge.dim must be even and > 0");
    if (kge.epochs < 1) e.push_back("kge.epochs must be >= 1");
    if (triples_path.empty()) {
      try {
        sbm.validate();
      } catch (const ConfigError& x) {
        e.push_back(x.what());
      }
      if (community_size > sbm.n_entities) e.push_back("community_size exceeds entity count");
    }
    for (const auto& a : attacks) {
      if (a.intensities.empty()) e.push_back("attack " + to_string(a.base.kind) + " has no intensities");
      for (double x : a.intensities)
        if (!(x >= 0.0 && x <= 1.0)) e.push_back("attack " + to_string(a.base.kind) + " intensity outside [0, 1]");
    }
    return e;
  }

  void validate() const {
    auto e = problems();
    if (!e.empty()) throw ConfigErrors(std::move(e));
  }

  json to_json() const {
    json atk = json::array();
    for (const auto& a : attacks) {
      json j = a.base.to_json();
      j.erase("intensity");
      j.erase("seed");
      j["intensities"] = a.intensities;
      atk.push_back(j);
    }
    json j = {{"dataset", dataset},
              {"method", method},
              {"kge", rotate_config_to_json(kge)},
              {"codec", codec},
              {"schedule", schedule.to_json()},
              {"steps", steps},
              {"detect_steps", detect_steps},
              {"community_size", community_size},
              {"density", density},
              {"mask", mask},
              {"predictor", predictor},
              {"key_ring_size", key_ring_size},
              {"attacks", atk},
              {"trials", trials},
              {"alpha", alpha},
              {"seed", seed},
              {"cosine_steps", cosine_steps},
              {"rank_test_triples", rank_test_triples},
              {"lawmm", {{"density_penalty", lawmm.density_penalty},
                         {"alpha_correction", lawmm.alpha_correction},
                         {"iterations", lawmm.iterations},
                         {"lr", lawmm.lr}}}};
    if (triples_path.empty()) {
      j["graph"] = {{"sbm", sbm.to_json()}};
    } else {
      j["graph"] = {{"triples", triples_path}};
    }
    return j;
  }

  /// Parses, then validates; every problem found is reported at once.
  static ExperimentConfig from_json(const json& j) {
    ExperimentConfig c;
    std::vector<std::string> e;
    auto field = [&](const char* key, auto& target) {
      if (!j.contains(key)) return;
      try {
        j.at(key).get_to(target);
      } catch (const json::exception&) {
        e.push_back(std::string("field '") + key + "' has the wrong type");
      }
    };
    if (!j.is_object()) throw ConfigErrors({"config must be a JSON object"});
    static const std::set<std::string> known{
        "dataset", "method", "graph", "kge", "codec", "schedule", "steps", "detect_steps",
        "community_size", "density", "mask", "predictor", "key_ring_size", "attacks", "trials",
        "alpha", "seed", "cosine_steps", "rank_test_triples", "lawmm"};
    for (const auto& [k, v] : j.items())
      if (!known.contains(k)) e.push_back("unknown field '" + k + "'");
    field("dataset", c.dataset);
    field("method", c.method);
    field("codec", c.codec);
    field("steps", c.steps);
    field("detect_steps", c.detect_steps);
    field("community_size", c.community_size);
    field("density", c.density);
    field("mask", c.mask);
    field("predictor", c.predictor);
    field("key_ring_size", c.key_ring_size);
    field("trials", c.trials);
    field("alpha", c.alpha);
    field("seed", c.seed);
    field("cosine_steps", c.cosine_steps);
    field("rank_test_triples", c.rank_test_triples);
    try {
      if (j.contains("graph")) {
        const auto& g = j.at("graph");
        if (g.contains("triples")) c.triples_path = g.at("triples").get<std::string>();
        if (g.contains("sbm")) c.sbm = SbmConfig::from_json(g.at("sbm"));
      }
    } catch (const std::exception& x) {
      e.push_back(std::string("graph: ") + x.what());
    }
    try {
      if (j.contains("kge")) {
        const auto& k = j.at("kge");
        c.kge.dim = k.value("dim", c.kge.dim);
        c.kge.epochs = k.value("epochs", c.kge.epochs);
        c.kge.lr = k.value("lr", c.kge.lr);
        c.kge.neg_samples = k.value("neg_samples", c.kge.neg_samples);
        c.kge.margin = k.value("margin", c.kge.margin);
        c.kge.seed = k.value("seed", c.kge.seed);
      }
    } catch (const json::exception& x) {
      e.push_back(std::string("kge: ") + x.what());
    }
    try {
      if (j.contains("schedule")) c.schedule = NoiseSchedule::from_json(j.at("schedule"));
    } catch (const std::exception& x) {
      e.push_back(std::string("schedule: ") + x.what());
    }
    try {
      if (j.contains("lawmm")) {
        const auto& l = j.at("lawmm");
        c.lawmm.density_penalty = l.value("density_penalty", c.lawmm.density_penalty);
        c.lawmm.alpha_correction = l.value("alpha_correction", c.lawmm.alpha_correction);
        c.lawmm.iterations = l.value("iterations", c.lawmm.iterations);
        c.lawmm.lr = l.value("lr", c.lawmm.lr);
      }
    } catch (const json::exception& x) {
      e.push_back(std::string("lawmm: ") + x.what());
    }
    if (j.contains("attacks")) {
      if (!j.at("attacks").is_array()) {
        e.push_back("attacks must be an array");
      } else {
        for (const auto& a : j.at("attacks")) {
          try {
            AttackRowSpec row;
            json base = a;
            base.erase("intensities");
            row.base = AttackSpec::from_json(base);
            row.intensities = a.value("intensities", std::vector<double>{row.base.intensity});
            c.attacks.push_back(std::move(row));
          } catch (const std::exception& x) {
            e.push_back(x.what());
          }
        }
      }
    }
    for (auto& p : c.problems()) e.push_back(std::move(p));
    if (!e.empty()) throw ConfigErrors(std::move(e));
    return c;
  }
};

/// Graph plus trained embedding shared by every trial.
struct ExperimentContext {
  KnowledgeGraph graph;
  EmbeddingMatrix embedding;
  std::vector<Triple> rank_test;
};

inline ExperimentContext build_context(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentContext ctx;
  ctx.graph = cfg.triples_path.empty() ? generate_sbm(cfg.sbm).graph : load_triples(cfg.triples_path);
  if (cfg.community_size > ctx.graph.n_entities()) throw ConfigError("community_size exceeds entity count");
  ctx.embedding = train_rotate(ctx.graph, cfg.kge).embedding;
  Rng rng(derive_seed(cfg.seed, "rank-test"));
  const auto n = std::min(cfg.rank_test_triples, ctx.graph.n_triples());
  auto idx = rng.sample_without_replacement(ctx.graph.n_triples(), n);
  std::sort(idx.begin(), idx.end());
  for (auto i : idx) ctx.rank_test.push_back(ctx.graph.triples()[i]);
  return ctx;
}

inline KeyRingConfig key_ring_config(const ExperimentConfig& cfg, std::uint64_t seed) {
  KeyRingConfig k;
  k.seed = seed;
  k.density = cfg.density;
  k.community_size = cfg.community_size;
  k.embed_steps = cfg.steps;
  k.detect_steps = cfg.detect_steps;
  k.schedule = cfg.schedule;
  k.predictor = cfg.predictor;
  k.keys_per_shape = cfg.key_ring_size;
  return k;
}

/// LAWMM mask for one key, fitted on seeded N(0,1) latents of the key's grid shape.
inline MaskMatrix lawmm_mask_for_key(const WatermarkKey& key, double density, LawmmConfig lc,
                                     std::size_t n_samples = 5) {
  lc.target_density = density;
  lc.seed = key.seed;
  Rng rng(derive_seed(key.seed, "lawmm-samples"));
  std::vector<LawmmSample> samples;
  for (std::size_t i = 0; i < n_samples; ++i)
    samples.push_back(make_lawmm_sample(rng.normal_matrix(key.m(), key.n()), key));
  LawmmProblem problem(std::move(samples), key.signature(), lc);
  return optimize_mask(problem, threshold_layered_mask).mask;
}

inline std::vector<WatermarkKey> trial_key_ring(const ExperimentContext& ctx, const ExperimentConfig& cfg,
                                                std::uint64_t seed) {
  auto ring = make_key_ring(ctx.graph, static_cast<Eigen::Index>(ctx.embedding.dim()), key_ring_config(cfg, seed));
  if (cfg.mask == "lawmm")
    for (auto& k : ring) k.mask = lawmm_mask_for_key(k, cfg.density, cfg.lawmm);
  return ring;
}

inline std::vector<WatermarkKey> with_embed_steps(std::vector<WatermarkKey> ring, std::size_t steps) {
  for (auto& k : ring) k.embed_steps = steps;
  return ring;
}

struct ReportRow {
  std::string dataset, method, attack;
  double intensity = 0.0;
  double auc = 0.0;
  double tpr_at_fpr_1pct = 0.0;
  std::vector<double> cosine;  ///< per cosine step
  double gmr = 0.0, hmr = 0.0, amr = 0.0, hits10 = 0.0;
  double detection_rate = 0.0;       ///< watermarked trials with decision true
  double false_positive_rate = 0.0;  ///< unwatermarked trials with decision true
  double mean_score_pos = 0.0, mean_score_neg = 0.0;
};

struct TrialRecord {
  std::string attack;
  double intensity = 0.0;
  std::size_t trial = 0;
  int label = 0;  ///< 1 watermarked, 0 unwatermarked
  double log_min_p = 0.0;
  bool decision = false;
};

struct MetricsReport {
  json config;
  std::vector<std::size_t> cosine_steps;
  std::vector<ReportRow> rows;
  std::vector<TrialRecord> trials;
  RankMetrics baseline_ranks;

  static constexpr const char* kProtocol =
      "score=-log(min p); positives=watermarked embedding; negatives=unwatermarked embedding "
      "with the same key ring and attack draw";

  std::string rows_csv() const {
    std::ostringstream o;
    o << std::setprecision(10);
    o << "# " << kProtocol << "\n";
    o << "dataset,method,attack,intensity,auc,tpr_at_fpr_1pct";
    for (auto s : cosine_steps) o << ",cosine_" << s;
    o << ",gmr,hmr,amr,hits10\n";
    for (const auto& r : rows) {
      o << r.dataset << ',' << r.method << ',' << r.attack << ',' << r.intensity << ',' << r.auc << ','
        << r.tpr_at_fpr_1pct;
      for (double c : r.cosine) o << ',' << c;
      o << ',' << r.gmr << ',' << r.hmr << ',' << r.amr << ',' << r.hits10 << '\n';
    }
    return o.str();
  }

  std::string trials_csv() const {
    std::ostringstream o;
    o << std::setprecision(17);
    o << "attack,intensity,trial,label,log_min_p,decision\n";
    for (const auto& t : trials)
      o << t.attack << ',' << t.intensity << ',' << t.trial << ',' << t.label << ',' << t.log_min_p << ','
        << (t.decision ? 1 : 0) << '\n';
    return o.str();
  }

  json to_json() const {
    json rows_j = json::array();
    for (const auto& r : rows) {
      json cos = json::object();
      for (std::size_t i = 0; i < cosine_steps.size(); ++i) cos[std::to_string(cosine_steps[i])] = r.cosine[i];
      rows_j.push_back({{"dataset", r.dataset},
                        {"method", r.method},
                        {"attack", r.attack},
                        {"intensity", r.intensity},
                        {"auc", r.auc},
                        {"tpr_at_fpr_1pct", r.tpr_at_fpr_1pct},
                        {"cosine", cos},
                        {"gmr", r.gmr},
                        {"hmr", r.hmr},
                        {"amr", r.amr},
                        {"hits10", r.hits10},
                        {"detection_rate", r.detection_rate},
                        {"false_positive_rate", r.false_positive_rate},
                        {"mean_score_pos", r.mean_score_pos},
                        {"mean_score_neg", r.mean_score_neg}});
    }
    return {{"protocol", kProtocol},
            {"config", config},
            {"baseline_ranks",
             {{"gmr", baseline_ranks.gmr}, {"hmr", baseline_ranks.hmr}, {"amr", baseline_ranks.amr}, {"hits10", baseline_ranks.hits_at_k}}},
            {"rows", rows_j}};
  }

  void write(const std::string& dir) const {
    std::filesystem::create_directories(dir);
    write_file(dir + "/report.csv", rows_csv());
    write_file(dir + "/trials.csv", trials_csv());
    write_json(dir + "/summary.json", to_json());
  }
};

/// Every (attack, intensity) row of a config, with "none" first when absent.
inline std::vector<AttackSpec> expand_rows(const ExperimentConfig& cfg) {
  std::vector<AttackSpec> rows;
  for (const auto& a : cfg.attacks)
    for (double x : a.intensities) {
      AttackSpec s = a.base;
      s.intensity = x;
      rows.push_back(s);
    }
  if (rows.empty()) rows.push_back(AttackSpec{});
  return rows;
}

struct TrialOutcome {
  std::vector<double> cosine;                  ///< per cosine step
  std::vector<DetectionResult> pos, neg;       ///< per row
};

/// One trial: fresh key ring, watermark, then each attack row on both the watermarked
/// and the unwatermarked embedding.
inline TrialOutcome run_trial(const ExperimentContext& ctx, const ExperimentConfig& cfg,
                              const std::vector<AttackSpec>& rows, std::size_t trial,
                              std::vector<Matrix>* attacked_pos = nullptr) {
  const std::uint64_t seed = cfg.seed + trial;
  const auto ring = trial_key_ring(ctx, cfg, seed);
  const Matrix& clean = ctx.embedding.entities;
  TrialOutcome out;
  Matrix watermarked;
  for (auto s : cfg.cosine_steps) {
    const Matrix w = redundant_embed(ctx.graph, clean, with_embed_steps(ring, s)).entities;
    out.cosine.push_back(cosine_similarity(clean, w));
    if (s == cfg.steps) watermarked = w;
  }
  if (watermarked.size() == 0) watermarked = redundant_embed(ctx.graph, clean, ring).entities;
  std::vector<WatermarkKey> surrogate;
  for (const auto& r : rows)
    if (r.kind == AttackKind::l2_embedding) {
      surrogate = make_key_ring(ctx.graph, static_cast<Eigen::Index>(ctx.embedding.dim()),
                                key_ring_config(cfg, derive_seed(seed, "surrogate")));
      break;
    }
  for (const auto& r : rows) {
    AttackSpec spec = r;
    spec.seed = derive_seed(seed, "attack");
    const auto ap = apply_attack(spec, ctx.graph, watermarked, cfg.community_size, surrogate);
    const auto an = apply_attack(spec, ctx.graph, clean, cfg.community_size, surrogate);
    out.pos.push_back(detect(ap.graph, ap.embedding, ring, cfg.alpha));
    out.neg.push_back(detect(an.graph, an.embedding, ring, cfg.alpha));
    if (attacked_pos) attacked_pos->push_back(ap.embedding);
  }
  return out;
}

inline RankMetrics embedding_rank_metrics(const ExperimentContext& ctx, const Matrix& entities) {
  if (ctx.rank_test.empty()) return {};
  EmbeddingMatrix e = ctx.embedding;
  e.entities = entities;
  return rank_metrics(link_prediction_ranks(ctx.graph, e, ctx.rank_test), 10);
}

inline MetricsReport run_experiment(const ExperimentContext& ctx, const ExperimentConfig& cfg) {
  cfg.validate();
  const auto rows = expand_rows(cfg);
  std::vector<TrialOutcome> outcomes(cfg.trials);
  std::vector<Matrix> first_attacked;  // rank metrics come from trial 0
  parallel_for(cfg.trials, [&](std::size_t t) {
    outcomes[t] = run_trial(ctx, cfg, rows, t, t == 0 ? &first_attacked : nullptr);
  });

  MetricsReport rep;
  rep.config = cfg.to_json();
  rep.cosine_steps = cfg.cosine_steps;
  rep.baseline_ranks = embedding_rank_metrics(ctx, ctx.embedding.entities);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    ReportRow row;
    row.dataset = cfg.dataset;
    row.method = cfg.method;
    row.attack = to_string(rows[r].kind);
    row.intensity = rows[r].intensity;
    std::vector<double> pos, neg;
    std::size_t det_pos = 0, det_neg = 0;
    row.cosine.assign(cfg.cosine_steps.size(), 0.0);
    for (std::size_t t = 0; t < cfg.trials; ++t) {
      const auto& o = outcomes[t];
      pos.push_back(o.pos[r].score());
      neg.push_back(o.neg[r].score());
      det_pos += o.pos[r].decision;
      det_neg += o.neg[r].decision;
      for (std::size_t c = 0; c < o.cosine.size(); ++c) row.cosine[c] += o.cosine[c] / static_cast<double>(cfg.trials);
      rep.trials.push_back({row.attack, row.intensity, t, 1, o.pos[r].log_min_p, o.pos[r].decision});
      rep.trials.push_back({row.attack, row.intensity, t, 0, o.neg[r].log_min_p, o.neg[r].decision});
    }
    const double n = static_cast<double>(cfg.trials);
    row.auc = auc(pos, neg);
    row.tpr_at_fpr_1pct = tpr_at_fpr(pos, neg, 0.01);
    row.detection_rate = static_cast<double>(det_pos) / n;
    row.false_positive_rate = static_cast<double>(det_neg) / n;
    row.mean_score_pos = std::accumulate(pos.begin(), pos.end(), 0.0) / n;
    row.mean_score_neg = std::accumulate(neg.begin(), neg.end(), 0.0) / n;
    const auto rm = embedding_rank_metrics(ctx, first_attacked[r]);
    row.gmr = rm.gmr;
    row.hmr = rm.hmr;
    row.amr = rm.amr;
    row.hits10 = rm.hits_at_k;
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

inline MetricsReport run_experiment(const ExperimentConfig& cfg) {
  return run_experiment(build_context(cfg), cfg);
}

}  // namespace kgmark
