#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "chips/config.hpp"
#include "chips/curvature.hpp"
#include "chips/endpoint.hpp"
#include "chips/errors.hpp"
#include "chips/numerics.hpp"
#include "chips/scoring.hpp"
#include "chips/sketch.hpp"

namespace chips {

// ---------------------------------------------------------------------------
// Gradient baselines
// ---------------------------------------------------------------------------

/// I_Dot = g^T g_eval
inline double score_dot(const SketchedVector& g, const SketchedVector& g_eval) { return inner(g, g_eval); }

/// Phi = Phi_pos + lambda_trak I, solved once; I_TRAK = g^T Phi^{-1} g_eval.
class TrakScorer {
 public:
  TrakScorer(const MomentAccumulator& acc, double lambda_trak, const SketchedVector& g_eval,
             const CgOptions& opts)
      : fingerprint_(acc.fingerprint()) {
    if (!(lambda_trak > 0.0)) throw ConfigError("lambda_trak must be > 0");
    if (g_eval.fingerprint != acc.fingerprint())
      throw SketchMismatch("TRAK moments and evaluation gradient live in different spaces");
    phi_ = acc.count() == 0 ? DenseMatrix(acc.dim(), acc.dim()) : acc.phi_pos();
    for (std::size_t i = 0; i < acc.dim(); ++i) phi_(i, i) += lambda_trak;
    auto res = cg_solve(phi_, g_eval.data, opts);
    dir_ = SketchedVector{std::move(res.x), fingerprint_};
    report_ = std::move(res.report);
  }

  double score(const SketchedVector& g) const { return inner(g, dir_); }
  const SketchedVector& direction() const noexcept { return dir_; }
  const DenseMatrix& phi() const noexcept { return phi_; }
  const CgReport& cg_report() const noexcept { return report_; }

 private:
  std::uint64_t fingerprint_;
  DenseMatrix phi_;
  SketchedVector dir_;
  CgReport report_;
};

/// Trace-scaled TRAK ridge, 1e-4 * trace(Phi_pos) / dim.
inline double default_lambda_trak(const MomentAccumulator& acc) { return default_ridge(acc, 0.0); }

struct TrajectoryPoint {
  const EndpointParams* params = nullptr;
  double eta = 0.0;
};

/// I_TracIn(i) = sum_t eta_t <Pi g_i^(t), g_eval> for every sample of one scoring batch.
/// The batch acts as the InfoNCE context at every checkpoint; g_eval stays fixed.
inline std::vector<double> tracin_batch_scores(std::span<const TrajectoryPoint> traj,
                                               const FeatureBatch& batch, const GradientSpace& space,
                                               const SketchedVector& g_eval) {
  if (traj.empty()) throw ConfigError("TracIn needs at least one checkpoint");
  std::vector<double> out(batch.size(), 0.0);
  for (const auto& pt : traj) {
    if (!(pt.eta > 0.0)) throw ConfigError("checkpoint learning rate must be > 0");
    if (pt.params->param_count() != space.input_dim())
      throw ShapeError("checkpoint shape does not match the gradient space");
    batch.validate(*pt.params);
    const auto geom = forward(*pt.params, batch);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto g = space.project(per_sample_gradient(*pt.params, batch, geom, i));
      out[i] += pt.eta * score_dot(g, g_eval);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Heuristic baselines
// ---------------------------------------------------------------------------

/// 2.5 * max(cos(x, y), 0)
inline double score_clipscore(std::span<const double> xhat, std::span<const double> yhat) {
  return 2.5 * std::max(cosine(xhat, yhat), 0.0);
}

/// Seeded uniform key in [0, 1) for one sample, independent of pool order.
inline double random_key(std::uint64_t seed, std::uint64_t id) {
  Rng rng(derive_seed(seed, "random-key"), id);
  return rng.uniform();
}

/// Uniform selection without replacement: the n ids with the largest keys.
inline std::vector<std::uint64_t> select_random(std::span<const std::uint64_t> ids, std::uint64_t seed,
                                                double r) {
  std::vector<ScoreRecord> recs;
  recs.reserve(ids.size());
  for (auto id : ids) recs.push_back(make_record(id, random_key(seed, id), 1.0, 1.0));
  return utility_and_select(recs, r).ids;
}

inline void validate_tags(std::uint64_t id, std::span<const std::string> tags,
                          const std::set<std::string>& vocabulary) {
  for (const auto& t : tags)
    if (!vocabulary.count(t))
      throw ConfigError("sample " + std::to_string(id) + " has tag '" + t + "' outside the concept vocabulary");
}

/// True when any tag is in the whitelist.
inline bool passes_concept_filter(std::span<const std::string> tags, const ConceptConfig& cfg) {
  for (const auto& t : tags)
    if (std::find(cfg.whitelist.begin(), cfg.whitelist.end(), t) != cfg.whitelist.end()) return true;
  return false;
}

/// Samples carrying an overrepresented tag survive with probability downsample_rate.
inline bool passes_concept_balance(std::uint64_t id, std::span<const std::string> tags,
                                   const ConceptConfig& cfg, std::uint64_t seed) {
  bool over = false;
  for (const auto& t : tags)
    over = over || std::find(cfg.overrepresented.begin(), cfg.overrepresented.end(), t) !=
                       cfg.overrepresented.end();
  if (!over) return true;
  Rng rng(derive_seed(seed, "concept-balance"), id);
  return rng.uniform() < cfg.downsample_rate;
}

struct TaggedId {
  std::uint64_t id = 0;
  std::vector<std::string> tags;
};

/// Score records for a concept method: eligible samples only, utility = seeded uniform key,
/// so top-n over them is uniform sampling from the eligible pool.
inline std::vector<ScoreRecord> concept_scores(std::span<const TaggedId> pool, Method method,
                                               const ConceptConfig& cfg, std::uint64_t seed) {
  if (method != Method::ConceptFilter && method != Method::ConceptBalance)
    throw ConfigError("concept_scores needs a concept method");
  const auto vocab = cfg.vocabulary();
  std::vector<ScoreRecord> out;
  for (const auto& s : pool) {
    validate_tags(s.id, s.tags, vocab);
    const bool keep = method == Method::ConceptFilter ? passes_concept_filter(s.tags, cfg)
                                                      : passes_concept_balance(s.id, s.tags, cfg, seed);
    if (keep) out.push_back(make_record(s.id, random_key(seed, s.id), 1.0, 1.0));
  }
  if (out.empty()) throw EmptyPool("no sample survives " + std::string(to_string(method)));
  return out;
}

}  // namespace chips
