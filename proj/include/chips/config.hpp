#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "chips/errors.hpp"
#include "chips/numerics.hpp"
#include "chips/scoring.hpp"
#include "chips/sketch.hpp"

namespace chips {

enum class Method { Chips, Dot, TracIn, Trak, ClipScore, Random, ConceptFilter, ConceptBalance };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::Chips: return "chips";
    case Method::Dot: return "dot";
    case Method::TracIn: return "tracin";
    case Method::Trak: return "trak";
    case Method::ClipScore: return "clipscore";
    case Method::Random: return "random";
    case Method::ConceptFilter: return "concept-filter";
    case Method::ConceptBalance: return "concept-balance";
  }
  return "unknown";
}

inline Method parse_method(std::string_view s) {
  for (auto m : {Method::Chips, Method::Dot, Method::TracIn, Method::Trak, Method::ClipScore,
                 Method::Random, Method::ConceptFilter, Method::ConceptBalance})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown method '" + std::string(s) + "'");
}

/// Whether a method needs end-point gradients.
inline bool is_gradient_method(Method m) {
  return m == Method::Chips || m == Method::Dot || m == Method::TracIn || m == Method::Trak;
}

struct ConceptConfig {
  std::vector<std::string> whitelist{"Clinical Imaging",      "Microscopy",
                                     "Immuno Assays",         "Illustrative Diagrams",
                                     "Chemical Structures",   "Maps",
                                     "Tools and Materials",   "Hand Drawn and Screen Based Visuals"};
  std::vector<std::string> overrepresented{"Plots and Charts", "Tables",
                                           "Scientific Formulae and Equations"};
  /// Closed tag vocabulary; whitelist and overrepresented tags are always members.
  std::vector<std::string> extra_vocabulary{"Other"};
  double downsample_rate = 0.25;

  std::set<std::string> vocabulary() const {
    std::set<std::string> v(whitelist.begin(), whitelist.end());
    v.insert(overrepresented.begin(), overrepresented.end());
    v.insert(extra_vocabulary.begin(), extra_vocabulary.end());
    return v;
  }
};

struct RunConfig {
  double alpha = 0.6;
  double beta = 0.5;
  std::optional<double> lambda_ridge;  // unset: trace-scaled default
  std::string sketch_kind = "countsketch";  // or "none" for exact P-space (P <= 4096)
  std::uint32_t sketch_k = 4096;
  std::uint32_t sketch_sparsity = 4;
  std::size_t cg_iters = 5;
  double cg_tol = 1e-10;
  bool cg_jacobi = false;
  std::size_t batch_size = 256;
  double eval_ema_decay = 0.0;
  double moment_ema_decay = 0.0;
  std::size_t eval_samples_per_task = 200;
  double retention = 0.1;
  std::vector<double> retention_grid{0.1, 0.2, 0.3, 0.5};
  std::uint64_t seed = 0;
  Method method = Method::Chips;
  Ablation ablation = Ablation::Full;
  std::string preconditioner = "curvature";  // curvature | identity
  std::string ridge = "auto";                // auto | identity | exact
  std::optional<double> lambda_trak;         // unset: trace-scaled default
  std::size_t tracin_epochs = 10;
  bool shard_rescale = false;
  ConceptConfig concepts;

  bool exact_space() const { return sketch_kind == "none"; }

  /// Sketch for a subspace of dimension p, seeded from the run seed.
  SketchSpec sketch_spec(std::uint64_t p) const {
    SketchSpec s;
    s.kind = parse_sketch_kind(sketch_kind);
    s.k = sketch_k;
    s.input_dim = p;
    s.seed = derive_seed(seed, "sketch");
    s.sparsity = sketch_sparsity;
    s.validate();
    return s;
  }

  CgOptions cg_options() const {
    CgOptions o;
    o.max_iters = cg_iters;
    o.tol = cg_tol;
    return o;
  }
};

namespace detail {

inline void require_range(bool ok, const std::string& key, const std::string& rule) {
  if (!ok) throw ConfigError("config key '" + key + "' " + rule);
}

inline void reject_unknown(const nlohmann::json& obj, const std::set<std::string>& allowed,
                           const std::string& prefix) {
  if (!obj.is_object()) throw ConfigError("config section '" + prefix + "' must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError("unknown config key '" + prefix + it.key() + "'");
}

template <typename T>
T get_as(const nlohmann::json& obj, const std::string& key, const std::string& full, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + full + "' has the wrong type");
  }
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["alpha"] = c.alpha;
  j["beta"] = c.beta;
  j["lambda_ridge"] = c.lambda_ridge ? nlohmann::json(*c.lambda_ridge) : nlohmann::json(nullptr);
  j["sketch"] = {{"kind", c.sketch_kind}, {"k", c.sketch_k}, {"sparsity", c.sketch_sparsity}};
  j["cg"] = {{"iters", c.cg_iters}, {"tol", c.cg_tol}, {"jacobi", c.cg_jacobi}};
  j["batch_size"] = c.batch_size;
  j["eval_ema_decay"] = c.eval_ema_decay;
  j["moment_ema_decay"] = c.moment_ema_decay;
  j["eval_samples_per_task"] = c.eval_samples_per_task;
  j["retention"] = c.retention;
  j["retention_grid"] = c.retention_grid;
  j["seed"] = c.seed;
  j["method"] = std::string(to_string(c.method));
  j["ablation"] = std::string(to_string(c.ablation));
  j["preconditioner"] = c.preconditioner;
  j["ridge"] = c.ridge;
  j["lambda_trak"] = c.lambda_trak ? nlohmann::json(*c.lambda_trak) : nlohmann::json(nullptr);
  j["tracin_epochs"] = c.tracin_epochs;
  j["shard_rescale"] = c.shard_rescale;
  j["concepts"] = {{"whitelist", c.concepts.whitelist},
                   {"overrepresented", c.concepts.overrepresented},
                   {"extra_vocabulary", c.concepts.extra_vocabulary},
                   {"downsample_rate", c.concepts.downsample_rate}};
  return j;
}

inline void validate(const RunConfig& c) {
  using detail::require_range;
  require_range(c.alpha >= 0.0 && c.alpha <= 1.0, "alpha", "must be in [0, 1]");
  require_range(c.beta >= 0.0 && c.beta <= 1.0, "beta", "must be in [0, 1]");
  if (c.lambda_ridge) require_range(*c.lambda_ridge > 0.0, "lambda_ridge", "must be > 0");
  if (c.sketch_kind != "none") parse_sketch_kind(c.sketch_kind);
  require_range(c.exact_space() || c.sketch_k > 0, "sketch.k", "must be > 0");
  require_range(c.sketch_sparsity >= 1, "sketch.sparsity", "must be >= 1");
  require_range(c.sketch_kind != "sparse-signed" || c.sketch_sparsity <= c.sketch_k, "sketch.sparsity",
                "must not exceed sketch.k");
  require_range(c.cg_iters >= 1, "cg.iters", "must be >= 1");
  require_range(c.cg_tol > 0.0, "cg.tol", "must be > 0");
  require_range(c.batch_size >= 2, "batch_size", "must be >= 2");
  require_range(c.eval_ema_decay >= 0.0 && c.eval_ema_decay < 1.0, "eval_ema_decay", "must be in [0, 1)");
  require_range(c.moment_ema_decay >= 0.0 && c.moment_ema_decay < 1.0, "moment_ema_decay", "must be in [0, 1)");
  require_range(c.eval_samples_per_task >= 1, "eval_samples_per_task", "must be >= 1");
  require_range(c.retention > 0.0 && c.retention <= 1.0, "retention", "must be in (0, 1]");
  require_range(!c.retention_grid.empty(), "retention_grid", "must not be empty");
  for (double r : c.retention_grid) require_range(r > 0.0 && r <= 1.0, "retention_grid", "entries must be in (0, 1]");
  require_range(c.preconditioner == "curvature" || c.preconditioner == "identity", "preconditioner",
                "must be 'curvature' or 'identity'");
  require_range(c.ridge == "auto" || c.ridge == "identity" || c.ridge == "exact", "ridge",
                "must be 'auto', 'identity' or 'exact'");
  if (c.lambda_trak) require_range(*c.lambda_trak > 0.0, "lambda_trak", "must be > 0");
  require_range(c.tracin_epochs >= 1, "tracin_epochs", "must be >= 1");
  require_range(c.concepts.downsample_rate >= 0.0 && c.concepts.downsample_rate <= 1.0,
                "concepts.downsample_rate", "must be in [0, 1]");
  require_range(!c.concepts.whitelist.empty(), "concepts.whitelist", "must not be empty");
}

inline RunConfig parse_config(const nlohmann::json& j) {
  using detail::get_as;
  static const std::set<std::string> top{
      "alpha", "beta", "lambda_ridge", "sketch", "cg", "batch_size", "eval_ema_decay",
      "moment_ema_decay", "eval_samples_per_task", "retention", "retention_grid", "seed",
      "method", "ablation", "preconditioner", "ridge", "lambda_trak", "tracin_epochs",
      "shard_rescale", "concepts"};
  detail::reject_unknown(j, top, "");
  RunConfig c;
  c.alpha = get_as<double>(j, "alpha", "alpha", c.alpha);
  c.beta = get_as<double>(j, "beta", "beta", c.beta);
  if (j.contains("lambda_ridge") && !j["lambda_ridge"].is_null())
    c.lambda_ridge = get_as<double>(j, "lambda_ridge", "lambda_ridge", 0.0);
  if (j.contains("sketch")) {
    const auto& s = j["sketch"];
    detail::reject_unknown(s, {"kind", "k", "sparsity"}, "sketch.");
    c.sketch_kind = get_as<std::string>(s, "kind", "sketch.kind", c.sketch_kind);
    if (s.contains("k") && s["k"].is_number_integer() && s["k"].get<std::int64_t>() < 0)
      throw ConfigError("config key 'sketch.k' must be > 0");
    c.sketch_k = get_as<std::uint32_t>(s, "k", "sketch.k", c.sketch_k);
    c.sketch_sparsity = get_as<std::uint32_t>(s, "sparsity", "sketch.sparsity", c.sketch_sparsity);
    if (c.sketch_kind != "none") {
      try {
        c.sketch_kind = std::string(to_string(parse_sketch_kind(c.sketch_kind)));
      } catch (const ConfigError&) {
        throw ConfigError("config key 'sketch.kind' must be countsketch, sparse-signed, srht or none");
      }
    }
  }
  if (j.contains("cg")) {
    const auto& s = j["cg"];
    detail::reject_unknown(s, {"iters", "tol", "jacobi"}, "cg.");
    c.cg_iters = get_as<std::size_t>(s, "iters", "cg.iters", c.cg_iters);
    c.cg_tol = get_as<double>(s, "tol", "cg.tol", c.cg_tol);
    c.cg_jacobi = get_as<bool>(s, "jacobi", "cg.jacobi", c.cg_jacobi);
  }
  c.batch_size = get_as<std::size_t>(j, "batch_size", "batch_size", c.batch_size);
  c.eval_ema_decay = get_as<double>(j, "eval_ema_decay", "eval_ema_decay", c.eval_ema_decay);
  c.moment_ema_decay = get_as<double>(j, "moment_ema_decay", "moment_ema_decay", c.moment_ema_decay);
  c.eval_samples_per_task =
      get_as<std::size_t>(j, "eval_samples_per_task", "eval_samples_per_task", c.eval_samples_per_task);
  c.retention = get_as<double>(j, "retention", "retention", c.retention);
  c.retention_grid = get_as<std::vector<double>>(j, "retention_grid", "retention_grid", c.retention_grid);
  c.seed = get_as<std::uint64_t>(j, "seed", "seed", c.seed);
  try {
    c.method = parse_method(get_as<std::string>(j, "method", "method", "chips"));
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("config key 'method': ") + e.what());
  }
  try {
    c.ablation = parse_ablation(get_as<std::string>(j, "ablation", "ablation", "full"));
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("config key 'ablation': ") + e.what());
  }
  c.preconditioner = get_as<std::string>(j, "preconditioner", "preconditioner", c.preconditioner);
  c.ridge = get_as<std::string>(j, "ridge", "ridge", c.ridge);
  if (j.contains("lambda_trak") && !j["lambda_trak"].is_null())
    c.lambda_trak = get_as<double>(j, "lambda_trak", "lambda_trak", 0.0);
  c.tracin_epochs = get_as<std::size_t>(j, "tracin_epochs", "tracin_epochs", c.tracin_epochs);
  c.shard_rescale = get_as<bool>(j, "shard_rescale", "shard_rescale", c.shard_rescale);
  if (j.contains("concepts")) {
    const auto& s = j["concepts"];
    detail::reject_unknown(s, {"whitelist", "overrepresented", "extra_vocabulary", "downsample_rate"},
                           "concepts.");
    c.concepts.whitelist = get_as<std::vector<std::string>>(s, "whitelist", "concepts.whitelist", c.concepts.whitelist);
    c.concepts.overrepresented =
        get_as<std::vector<std::string>>(s, "overrepresented", "concepts.overrepresented", c.concepts.overrepresented);
    c.concepts.extra_vocabulary = get_as<std::vector<std::string>>(s, "extra_vocabulary", "concepts.extra_vocabulary",
                                                                   c.concepts.extra_vocabulary);
    c.concepts.downsample_rate =
        get_as<double>(s, "downsample_rate", "concepts.downsample_rate", c.concepts.downsample_rate);
  }
  validate(c);
  return c;
}

inline RunConfig parse_config_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(j);
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path.string());
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_config_text(text);
}

/// Canonical dump (sorted keys, fully defaulted) of the config.
inline std::string canonical_json(const RunConfig& c) { return to_json(c).dump(); }

/// FNV-1a of the canonical dump; semantically equal configs hash equal.
inline std::uint64_t fingerprint(const RunConfig& c) { return fnv1a64(canonical_json(c)); }

}  // namespace chips
