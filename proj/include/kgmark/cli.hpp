#pragma once

#include "kgmark/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <set>

namespace kgmark::cli {

enum ExitCode : int { kOk = 0, kNotDetected = 1, kError = 2 };

/// Every option any subcommand understands. A JSON --config supplies values for options
/// not given on the command line; flags win.
struct Options {
  std::string triples, embedding, graph, key, out, config, attack = "none", trace, mask = "random",
                                                             predictor = "linear";
  double alpha = 5e-5;
  std::size_t steps = 75;
  double density = 0.015;
  std::uint64_t seed = 1;
  double intensity = 0.0;
  std::size_t community_size = 100;
  std::size_t community = 0;
  std::size_t dim = 64;
  std::size_t epochs = 50;
  std::size_t iterations = 100;
  std::optional<std::size_t> samples;  ///< LAWMM samples per key; embed defaults to 5
  std::size_t trials = 0;  ///< eval override; 0 keeps the config value
  std::set<std::string> given;  ///< option names set on the command line, in JSON spelling

  bool flag(const std::string& name) const { return given.count(name) > 0; }

  json to_json() const {
    return {{"triples", triples},     {"embedding", embedding},
            {"graph", graph},         {"key", key},
            {"out", out},             {"config", config},
            {"attack", attack},       {"trace", trace},
            {"mask", mask},           {"predictor", predictor},
            {"alpha", alpha},         {"steps", steps},
            {"density", density},     {"seed", seed},
            {"intensity", intensity}, {"community_size", community_size},
            {"community", community}, {"dim", dim},
            {"epochs", epochs},       {"iterations", iterations},
            {"samples", samples ? json(*samples) : json(nullptr)},     {"trials", trials}};
  }
};

namespace detail {

inline void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string("missing --") + what);
  if (!std::filesystem::is_regular_file(path)) throw IoError(std::string(what) + " file not found: " + path);
}

inline void require_out(const std::string& path) {
  if (path.empty()) throw ConfigError("missing --out");
}

/// Graph for --graph (or --triples), indexed by the first labels sidecar found next to the
/// graph or the embedding. Without one, ids follow first appearance in the file.
inline KnowledgeGraph load_graph(const Options& o) {
  const std::string& p = o.graph.empty() ? o.triples : o.graph;
  require_file(p, "graph");
  auto g = load_triples(p);
  std::vector<std::string> sidecars{p + ".labels.json"};
  if (!o.embedding.empty()) sidecars.push_back(o.embedding + ".labels.json");
  for (const auto& side : sidecars)
    if (std::filesystem::is_regular_file(side)) return with_label_universe(g, read_json(side));
  return g;
}

inline void check_density(double d) {
  if (!(d > 0.0 && d < 1.0)) throw ConfigError("--density must lie in (0, 1)");
}

inline void check_alpha(double a) {
  if (!(a > 0.0 && a < 1.0)) throw ConfigError("--alpha must lie in (0, 1)");
}

inline KeyRingConfig ring_config(const Options& o) {
  check_density(o.density);
  KeyRingConfig k;
  k.seed = o.seed;
  k.density = o.density;
  k.community_size = o.community_size;
  k.embed_steps = o.steps;
  k.detect_steps = o.steps;
  k.predictor = o.predictor;
  return k;
}

/// Triples file next to an artifact: `<path>.tsv`, with the label sidecar.
inline void save_graph(const KnowledgeGraph& g, const std::string& path) {
  save_triples(g, path);
  write_json(path + ".labels.json", labels_json(g));
}

/// Reads a key ring file; any malformed content is a parse error.
inline std::vector<WatermarkKey> load_ring(const std::string& path) {
  require_file(path, "key");
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  auto ring = key_ring_from_json(j);
  if (ring.empty()) throw ConfigError(path + ": empty key ring");
  return ring;
}

}  // namespace detail

inline int cmd_train_kge(const Options& o, std::ostream&) {
  detail::require_file(o.triples, "triples");
  detail::require_out(o.out);
  const auto g = load_triples(o.triples);
  RotateConfig rc;
  rc.dim = o.dim;
  rc.epochs = o.epochs;
  rc.seed = o.seed;
  const auto res = train_rotate(g, rc);
  save_embedding(o.out, res.embedding);
  write_json(o.out + ".labels.json", labels_json(g));
  return kOk;
}

inline int cmd_embed(const Options& o, std::ostream& log) {
  const auto g = detail::load_graph(o);
  detail::require_file(o.embedding, "embedding");
  detail::require_out(o.out);
  if (o.key.empty()) throw ConfigError("missing --key (output key ring path)");
  auto emb = load_embedding(o.embedding);
  if (emb.n_entities() != g.n_entities()) throw ShapeError("embedding rows do not match the graph's entity count");
  auto ring = make_key_ring(g, static_cast<Eigen::Index>(emb.dim()), detail::ring_config(o));
  if (o.mask == "lawmm") {
    LawmmConfig lc;
    lc.iterations = o.iterations;
    for (auto& k : ring) k.mask = lawmm_mask_for_key(k, o.density, lc, o.samples.value_or(5));
  } else if (o.mask != "random") {
    throw ConfigError("--mask must be 'random' or 'lawmm'");
  }
  const auto res = redundant_embed(g, emb.entities, ring);
  const double cos = cosine_similarity(emb.entities, res.entities);
  emb.entities = res.entities;
  save_embedding(o.out, emb);
  write_json(o.out + ".labels.json", labels_json(g));
  write_json(o.key, key_ring_to_json(ring));
  log << "embed: " << res.partition.l() << " communities, " << ring.size() << " keys, cosine " << cos << "\n";
  return kOk;
}

inline int cmd_detect(const Options& o, std::ostream& log) {
  const auto g = detail::load_graph(o);
  detail::require_file(o.embedding, "embedding");
  detail::check_alpha(o.alpha);
  const auto ring = detail::load_ring(o.key);
  const auto emb = load_embedding(o.embedding);
  const auto res = detect(g, emb.entities, ring, o.alpha);
  const json report = res.to_json(o.embedding);
  if (!o.out.empty()) write_json(o.out, report);
  log << "detect: min p " << res.min_p << " (log " << res.log_min_p << "), corrected alpha "
      << res.corrected_alpha << ", decision " << (res.decision ? "watermarked" : "not detected") << "\n";
  return res.decision ? kOk : kNotDetected;
}

inline int cmd_attack(const Options& o, std::ostream& log) {
  const auto g = detail::load_graph(o);
  detail::require_file(o.embedding, "embedding");
  detail::require_out(o.out);
  auto emb = load_embedding(o.embedding);
  AttackSpec spec;
  spec.kind = attack_kind_from_string(o.attack);
  spec.intensity = o.intensity;
  spec.seed = o.seed;
  spec.community = o.community;
  std::vector<WatermarkKey> surrogate;
  if (spec.kind == AttackKind::l2_embedding) {
    KeyRingConfig kc = detail::ring_config(o);
    kc.seed = derive_seed(o.seed, "surrogate");
    surrogate = make_key_ring(g, static_cast<Eigen::Index>(emb.dim()), kc);
  }
  const auto out = apply_attack(spec, g, emb.entities, o.community_size, surrogate);
  emb.entities = out.embedding;
  std::filesystem::create_directories(o.out);
  save_embedding(o.out + "/embedding.kgmk", emb);
  write_json(o.out + "/embedding.kgmk.labels.json", labels_json(out.graph));
  detail::save_graph(out.graph, o.out + "/triples.tsv");
  write_json(o.out + "/attack.json", spec.to_json());
  log << "attack: " << to_string(spec.kind) << " at " << spec.intensity << ", " << out.graph.n_triples()
      << " triples kept\n";
  return kOk;
}

inline int cmd_eval(const Options& o, std::ostream& log) {
  detail::require_file(o.config, "config");
  detail::require_out(o.out);
  json j;
  try {
    j = json::parse(read_file(o.config));
  } catch (const json::exception& e) {
    throw ParseError(o.config + ": " + e.what());
  }
  if (j.contains("cli")) j.erase("cli");
  if (o.trials > 0) j["trials"] = o.trials;
  const auto cfg = ExperimentConfig::from_json(j);
  log << "eval: resolved experiment " << cfg.to_json().dump() << "\n";
  const auto rep = run_experiment(cfg);
  rep.write(o.out);
  for (const auto& r : rep.rows)
    log << "  " << r.attack << " " << r.intensity << ": auc " << r.auc << ", detected " << r.detection_rate
        << ", false positives " << r.false_positive_rate << "\n";
  return kOk;
}

inline Matrix matrix_from_json(const json& j) {
  if (!j.is_array() || j.empty() || !j[0].is_array() || j[0].empty())
    throw ConfigError("sample latent must be a non-empty array of rows");
  Matrix m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(j[0].size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const json& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || row.size() != static_cast<std::size_t>(m.cols()))
      throw ShapeError("sample latent rows must have equal length");
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

/// Samples file for optimize-mask:
///   {"key": path, "samples": count | [[[row]...]...], "density", "iterations", "lr", "objective"}
/// A count draws seeded N(0, 1) latents per key; explicit latents apply to keys of their shape.
/// Flags win over file values.
inline int cmd_optimize_mask(Options o, std::ostream& log) {
  detail::require_out(o.out);
  json spec = json::object();
  if (!o.config.empty()) {
    detail::require_file(o.config, "config");
    try {
      spec = json::parse(read_file(o.config));
    } catch (const json::exception& e) {
      throw ParseError(o.config + ": " + e.what());
    }
    if (!spec.is_object()) throw ConfigError("samples config must be a JSON object");
    for (const auto& [name, _] : spec.items())
      if (name != "key" && name != "samples" && name != "density" && name != "iterations" && name != "lr" &&
          name != "objective")
        throw ConfigError("samples config: unknown field '" + name + "'");
  }
  LawmmConfig lc;
  std::vector<Matrix> explicit_latents;
  std::size_t count = 0;
  try {
    if (o.key.empty() && spec.contains("key")) o.key = spec.at("key").get<std::string>();
    if (spec.contains("density") && !o.flag("density")) o.density = spec.at("density").get<double>();
    if (spec.contains("iterations") && !o.flag("iterations")) o.iterations = spec.at("iterations").get<std::size_t>();
    if (spec.contains("lr")) lc.lr = spec.at("lr").get<double>();
    if (spec.contains("objective")) {
      const auto obj = spec.at("objective").get<std::string>();
      if (obj == "presample") lc.objective = LawmmObjective::presample;
      else if (obj != "postsample") throw ConfigError("samples config: objective must be presample or postsample");
    }
    if (o.samples) {
      count = *o.samples;
    } else if (spec.contains("samples")) {
      const json& s = spec.at("samples");
      if (s.is_number_unsigned()) count = s.get<std::size_t>();
      else if (s.is_array())
        for (const auto& z : s) explicit_latents.push_back(matrix_from_json(z));
      else throw ConfigError("samples must be a count or an array of latents");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("samples config: ") + e.what());
  }
  if (count == 0 && explicit_latents.empty()) throw ConfigError("optimize-mask: no samples given");
  detail::check_density(o.density);
  lc.target_density = o.density;
  lc.iterations = o.iterations;
  auto ring = detail::load_ring(o.key);
  std::vector<TraceRow> trace;
  for (auto& k : ring) {
    lc.seed = k.seed;
    std::vector<LawmmSample> samples;
    if (count > 0) {
      Rng rng(derive_seed(k.seed, "lawmm-samples"));
      for (std::size_t i = 0; i < count; ++i) samples.push_back(make_lawmm_sample(rng.normal_matrix(k.m(), k.n()), k));
    } else {
      for (const auto& z : explicit_latents)
        if (z.rows() == k.m() && z.cols() == k.n()) samples.push_back(make_lawmm_sample(z, k));
      if (samples.empty())
        throw ShapeError("optimize-mask: no sample matches key shape " + std::to_string(k.m()) + "x" +
                         std::to_string(k.n()));
    }
    LawmmProblem problem(std::move(samples), k.signature(), lc);
    auto res = optimize_mask(problem, threshold_layered_mask);
    log << "optimize-mask: key " << k.m() << "x" << k.n() << " objective " << res.initial_objective << " -> "
        << res.final_objective << ", " << res.mask.count() << " cells\n";
    k.mask = res.mask;
    trace.insert(trace.end(), res.trace.begin(), res.trace.end());
  }
  write_json(o.out, key_ring_to_json(ring));
  if (!o.trace.empty()) write_trace_csv(o.trace, trace);
  return kOk;
}

/// Applies JSON config values for options absent from the command line.
inline void merge_config(const CLI::App& sub, Options& o) {
  if (o.config.empty() || sub.get_name() == "eval" || sub.get_name() == "optimize-mask") return;
  detail::require_file(o.config, "config");
  json j;
  try {
    j = json::parse(read_file(o.config));
  } catch (const json::exception& e) {
    throw ParseError(o.config + ": " + e.what());
  }
  const json defaults = j.contains("cli") ? j.at("cli") : j;
  if (!defaults.is_object()) throw ConfigError("--config must hold a JSON object");
  const json known = o.to_json();
  json merged = known;
  for (const auto& [name, value] : defaults.items()) {
    if (!known.contains(name)) throw ConfigError("--config: unknown option '" + name + "'");
    if (!o.flag(name)) merged[name] = value;
  }
  try {
    const std::string keep = o.config;
    o.triples = merged.at("triples");
    o.embedding = merged.at("embedding");
    o.graph = merged.at("graph");
    o.key = merged.at("key");
    o.out = merged.at("out");
    o.attack = merged.at("attack");
    o.trace = merged.at("trace");
    o.mask = merged.at("mask");
    o.predictor = merged.at("predictor");
    o.alpha = merged.at("alpha");
    o.steps = merged.at("steps");
    o.density = merged.at("density");
    o.seed = merged.at("seed");
    o.intensity = merged.at("intensity");
    o.community_size = merged.at("community_size");
    o.community = merged.at("community");
    o.dim = merged.at("dim");
    o.epochs = merged.at("epochs");
    o.iterations = merged.at("iterations");
    if (!merged.at("samples").is_null()) o.samples = merged.at("samples").get<std::size_t>();
    o.trials = merged.at("trials");
    o.config = keep;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("--config: ") + e.what());
  }
}

inline int run(int argc, const char* const* argv, std::ostream& log = std::cerr) {
  CLI::App app{"kgmark: spectral watermarking of knowledge-graph embeddings"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* s) {
    s->add_option("--config", o.config, "JSON file with option defaults");
    s->add_option("--seed", o.seed, "base seed");
    s->add_option("--out", o.out, "output path");
  };
  auto add_graph = [&](CLI::App* s) {
    s->add_option("--graph", o.graph, "triples file of the graph");
    s->add_option("--triples", o.triples, "alias of --graph");
    s->add_option("--embedding", o.embedding, "KGMK embedding file");
  };
  auto add_key = [&](CLI::App* s) {
    s->add_option("--steps", o.steps, "DDIM inference steps");
    s->add_option("--density", o.density, "mask density");
    s->add_option("--community-size", o.community_size, "entities per community");
    s->add_option("--predictor", o.predictor, "noise predictor: linear | zero");
  };

  auto* train = app.add_subcommand("train-kge", "train a RotatE embedding");
  add_common(train);
  train->add_option("--triples", o.triples, "triples file");
  train->add_option("--dim", o.dim, "embedding width (even)");
  train->add_option("--epochs", o.epochs, "training epochs");

  auto* embed = app.add_subcommand("embed", "watermark an embedding; writes the key ring");
  add_common(embed);
  add_graph(embed);
  add_key(embed);
  embed->add_option("--key", o.key, "key ring output path");
  embed->add_option("--mask", o.mask, "mask: random | lawmm");
  embed->add_option("--iterations", o.iterations, "LAWMM iterations");
  embed->add_option("--samples", o.samples, "LAWMM samples per key");

  auto* det = app.add_subcommand("detect", "test an embedding for a watermark (exit 0 detected, 1 not)");
  add_common(det);
  add_graph(det);
  det->add_option("--key", o.key, "key ring file");
  det->add_option("--alpha", o.alpha, "significance level");

  auto* atk = app.add_subcommand("attack", "apply one attack; writes embedding.kgmk and triples.tsv");
  add_common(atk);
  add_graph(atk);
  add_key(atk);
  atk->add_option("--attack", o.attack, "attack kind");
  atk->add_option("--intensity", o.intensity, "affected fraction");
  atk->add_option("--community", o.community, "community index for community_deletion");

  auto* ev = app.add_subcommand("eval", "run an experiment config; writes report.csv, trials.csv, summary.json");
  ev->add_option("--config", o.config, "experiment JSON");
  ev->add_option("--out", o.out, "output directory");
  ev->add_option("--trials", o.trials, "override trial count");

  auto* opt = app.add_subcommand("optimize-mask", "LAWMM mask optimization for every key of a ring");
  opt->add_option("--key", o.key, "key ring file");
  opt->add_option("--density", o.density, "target density");
  opt->add_option("--iterations", o.iterations, "optimizer iterations");
  opt->add_option("--config", o.config, "samples JSON: key, samples, density, iterations, lr, objective");
  opt->add_option("--out", o.out, "output key ring path");
  opt->add_option("--samples", o.samples, "N(0,1) samples per key (overrides the config)");
  opt->add_option("--trace", o.trace, "trace CSV output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, log, log);
    return rc == 0 ? kOk : kError;
  }

  CLI::App* sub = app.get_subcommands().front();
  for (const auto* opt : sub->get_options())
    if (opt->count() > 0 && !opt->get_lnames().empty()) {
      std::string name = opt->get_lnames().front();
      std::replace(name.begin(), name.end(), '-', '_');
      o.given.insert(name);
    }
  try {
    merge_config(*sub, o);
    json resolved = o.to_json();
    resolved["subcommand"] = sub->get_name();
    log << "config: " << resolved.dump() << "\n";
    const std::string name = sub->get_name();
    if (name == "train-kge") return cmd_train_kge(o, log);
    if (name == "embed") return cmd_embed(o, log);
    if (name == "detect") return cmd_detect(o, log);
    if (name == "attack") return cmd_attack(o, log);
    if (name == "eval") return cmd_eval(o, log);
    return cmd_optimize_mask(o, log);
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kError;
  }
}

}  // namespace kgmark::cli
