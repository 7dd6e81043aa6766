#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "chips/endpoint.hpp"
#include "chips/errors.hpp"
#include "chips/numerics.hpp"
#include "chips/sketch.hpp"

namespace chips {

/// Per-sample utility and its factors. utility = alignment * learnability * relevance.
struct ScoreRecord {
  std::uint64_t id = 0;
  double alignment = 0.0;
  double learnability = 1.0;
  double relevance = 1.0;
  double utility = 0.0;
  std::uint64_t batch_fingerprint = 0;

  friend bool operator==(const ScoreRecord&, const ScoreRecord&) = default;
};

inline ScoreRecord make_record(std::uint64_t id, double alignment, double learnability,
                               double relevance, std::uint64_t batch_fingerprint = 0) {
  return {id, alignment, learnability, relevance, alignment * learnability * relevance,
          batch_fingerprint};
}

/// Hash of a scoring batch's composition (ids in batch order).
inline std::uint64_t batch_fingerprint(std::span<const std::uint64_t> ids) {
  std::uint64_t h = fnv1a64("scoring-batch/v1");
  for (auto id : ids) h = hash_combine(h, id);
  return h;
}

enum class Ablation { Full, AlignmentOnly, AlignmentMargin };

inline std::string_view to_string(Ablation a) {
  switch (a) {
    case Ablation::Full: return "full";
    case Ablation::AlignmentOnly: return "alignment-only";
    case Ablation::AlignmentMargin: return "alignment-margin";
  }
  return "unknown";
}

inline Ablation parse_ablation(std::string_view s) {
  if (s == "full") return Ablation::Full;
  if (s == "alignment-only") return Ablation::AlignmentOnly;
  if (s == "alignment-margin") return Ablation::AlignmentMargin;
  throw ConfigError("unknown ablation '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Alignment
// ---------------------------------------------------------------------------

inline double alignment_score(const SketchedVector& g, const SketchedVector& dir) {
  return inner(g, dir);
}

inline double alignment_score(std::span<const double> g, std::span<const double> dir) {
  return dot(g, dir);
}

// ---------------------------------------------------------------------------
// Learnability
// ---------------------------------------------------------------------------

struct LearnabilityParts {
  double p_corr = 0.0;
  double margin = 0.0;
  double value = 0.0;
};

/// p_corr = (p_i2t_ii + p_t2i_ii)/2, m = s_ii - hardest competing logit in either direction,
/// w_L = (1 - p_corr)(1 + sigmoid(-m)).
inline LearnabilityParts learnability_parts(const BatchGeometry& g, std::size_t i) {
  const std::size_t b = g.size();
  if (i >= b) throw IndexOutOfRange("sample index " + std::to_string(i) + " outside batch");
  if (b < 2) throw MarginUndefined("hardest-negative margin needs a batch of at least 2");
  LearnabilityParts out;
  out.p_corr = 0.5 * (g.p_i2t(i, i) + g.p_t2i(i, i));
  double hardest = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < b; ++j) {
    if (j == i) continue;
    hardest = std::max({hardest, g.s(i, j), g.s(j, i)});
  }
  out.margin = g.s(i, i) - hardest;
  out.value = (1.0 - out.p_corr) * (1.0 + sigmoid(-out.margin));
  return out;
}

inline double learnability(const BatchGeometry& g, std::size_t i) {
  return learnability_parts(g, i).value;
}

/// Learnability factor under an ablation mode.
inline double learnability_weight(const BatchGeometry& g, std::size_t i, Ablation mode) {
  if (mode == Ablation::AlignmentOnly) return 1.0;
  const auto parts = learnability_parts(g, i);
  if (mode == Ablation::AlignmentMargin) return 1.0 + sigmoid(-parts.margin);
  return parts.value;
}

// ---------------------------------------------------------------------------
// Relevance
// ---------------------------------------------------------------------------

struct EvalPrototypes {
  Vector mu_x;
  Vector mu_y;
  double beta = 0.5;
};

/// Running mean of normalized evaluation embeddings.
class PrototypeAccumulator {
 public:
  void add(const BatchGeometry& g) {
    if (count_ == 0) {
      sum_x_ = Vector(g.xhat.cols());
      sum_y_ = Vector(g.yhat.cols());
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
      axpy(1.0, g.xhat.row(i), sum_x_);
      axpy(1.0, g.yhat.row(i), sum_y_);
    }
    count_ += g.size();
  }

  std::size_t count() const noexcept { return count_; }

  EvalPrototypes finish(double beta) const {
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must be in [0, 1]");
    if (count_ == 0) throw ConfigError("evaluation prototypes need at least one sample");
    EvalPrototypes p{sum_x_, sum_y_, beta};
    scale(p.mu_x.span(), 1.0 / static_cast<double>(count_));
    scale(p.mu_y.span(), 1.0 / static_cast<double>(count_));
    return p;
  }

 private:
  Vector sum_x_, sum_y_;
  std::size_t count_ = 0;
};

inline double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = norm2(a), nb = norm2(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

/// w_R = sigmoid((1 - beta) cos(x, mu_x) + beta cos(y, mu_y)), always in [sigmoid(-1), sigmoid(1)].
inline double relevance(std::span<const double> xhat, std::span<const double> yhat,
                        const EvalPrototypes& proto) {
  if (norm2(proto.mu_x) == 0.0 || norm2(proto.mu_y) == 0.0)
    throw ConfigError("evaluation prototype has zero norm");
  const double z = (1.0 - proto.beta) * cosine(xhat, proto.mu_x) + proto.beta * cosine(yhat, proto.mu_y);
  return sigmoid(z);
}

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

struct SelectionManifest {
  std::string method = "chips";
  std::uint64_t config_fingerprint = 0;
  double retention = 0.0;
  std::uint64_t pool_size = 0;
  std::vector<std::uint64_t> ids;  // rank order
  double drift_kl_upper = 1.0;

  friend bool operator==(const SelectionManifest&, const SelectionManifest&) = default;
};

/// n = floor(r * pool). A 1e-9 slack absorbs binary representation error of decimal r.
inline std::uint64_t retained_count(double r, std::uint64_t pool_size) {
  if (!(r > 0.0 && r <= 1.0)) throw ConfigError("retention must be in (0, 1]");
  const double n = std::floor(r * static_cast<double>(pool_size) + 1e-9);
  return std::min<std::uint64_t>(pool_size, static_cast<std::uint64_t>(n));
}

/// Utility descending, then id ascending.
inline bool ranks_before(const ScoreRecord& a, const ScoreRecord& b) {
  if (a.utility != b.utility) return a.utility > b.utility;
  return a.id < b.id;
}

inline void require_unique_ids(std::span<const ScoreRecord> records) {
  std::unordered_set<std::uint64_t> seen;
  seen.reserve(records.size());
  for (const auto& r : records)
    if (!seen.insert(r.id).second) throw DuplicateSample("duplicate sample id " + std::to_string(r.id));
}

/// Top n records by rank order, via partial selection.
inline std::vector<ScoreRecord> top_n(std::span<const ScoreRecord> records, std::size_t n) {
  for (const auto& r : records)
    if (std::isnan(r.utility)) throw NumericalBreakdown("NaN utility for sample " + std::to_string(r.id));
  std::vector<ScoreRecord> v(records.begin(), records.end());
  n = std::min(n, v.size());
  if (n < v.size()) std::nth_element(v.begin(), v.begin() + n, v.end(), ranks_before);
  v.resize(n);
  std::sort(v.begin(), v.end(), ranks_before);
  return v;
}

/// Retains floor(r * pool_size) records. pool_size defaults to the number of records.
inline SelectionManifest utility_and_select(std::span<const ScoreRecord> records, double r,
                                            std::uint64_t pool_size = 0) {
  require_unique_ids(records);
  if (pool_size == 0) pool_size = records.size();
  SelectionManifest m;
  m.retention = r;
  m.pool_size = pool_size;
  const auto kept = top_n(records, retained_count(r, pool_size));
  m.ids.reserve(kept.size());
  for (const auto& rec : kept) m.ids.push_back(rec.id);
  return m;
}

// ---------------------------------------------------------------------------
// Drift
// ---------------------------------------------------------------------------

struct DriftReport {
  double kl = 0.0;  // nats, KL(q || q_base)
  double min_ratio = 1.0;
  double max_ratio = 1.0;
  std::size_t included = 0;
  std::size_t excluded = 0;  // records with non-positive base weight
};

/// q_base(z) proportional to alignment * learnability, q(z) proportional to q_base(z) * relevance.
/// Density ratio q/q_base = w_R / E_{q_base}[w_R].
inline DriftReport drift_diagnostics(std::span<const ScoreRecord> records) {
  DriftReport rep;
  double zb = 0.0, zq = 0.0;
  for (const auto& r : records) {
    const double b = r.alignment * r.learnability;
    if (!(b > 0.0)) {
      ++rep.excluded;
      continue;
    }
    ++rep.included;
    zb += b;
    zq += b * r.relevance;
  }
  if (rep.included == 0)
    throw DegenerateDistribution("no record has a positive base weight");
  const double ew = zq / zb;  // E_{q_base}[w_R]
  rep.min_ratio = std::numeric_limits<double>::infinity();
  rep.max_ratio = -std::numeric_limits<double>::infinity();
  double kl = 0.0;
  for (const auto& r : records) {
    const double b = r.alignment * r.learnability;
    if (!(b > 0.0)) continue;
    const double ratio = r.relevance / ew;
    rep.min_ratio = std::min(rep.min_ratio, ratio);
    rep.max_ratio = std::max(rep.max_ratio, ratio);
    const double q = b * r.relevance / zq;
    kl += q * std::log(ratio);
  }
  rep.kl = std::max(0.0, kl);
  if (rep.kl > 1.0 + 1e-9)
    throw NumericalBreakdown("selection drift " + std::to_string(rep.kl) + " nats exceeds 1");
  return rep;
}

/// |top-n by base weight  intersect  top-n by utility| / n.
inline double hard_selection_overlap(std::span<const ScoreRecord> records, std::size_t n) {
  if (n == 0) return 1.0;
  std::vector<ScoreRecord> base(records.begin(), records.end());
  for (auto& r : base) r.utility = r.alignment * r.learnability;
  const auto a = top_n(base, n);
  const auto b = top_n(records, n);
  std::unordered_set<std::uint64_t> ids;
  for (const auto& r : a) ids.insert(r.id);
  std::size_t common = 0;
  for (const auto& r : b) common += ids.count(r.id);
  return static_cast<double>(common) / static_cast<double>(a.size());
}

/// Z-normalizes utility within one shard: (u - mean) / std. A constant shard maps to 0.
inline void shard_rescale(std::span<ScoreRecord> shard) {
  if (shard.empty()) return;
  std::vector<double> u;
  u.reserve(shard.size());
  for (const auto& r : shard) u.push_back(r.utility);
  const double m = mean(u);
  const double sd = std::sqrt(variance(u));
  for (auto& r : shard) r.utility = sd > 0.0 ? (r.utility - m) / sd : 0.0;
}

}  // namespace chips
