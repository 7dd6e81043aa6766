#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "chips/baselines.hpp"
#include "chips/config.hpp"
#include "chips/curvature.hpp"
#include "chips/endpoint.hpp"
#include "chips/errors.hpp"
#include "chips/io.hpp"
#include "chips/scoring.hpp"
#include "chips/sketch.hpp"
#include "chips/synth.hpp"

/// End-to-end orchestration behind the command line: synth, score, select.
namespace chips::pipeline {

namespace fs = std::filesystem;

/// Exact-space scoring is limited to this subspace size.
inline constexpr std::size_t kExactSpaceMaxDim = 4096;

/// Rethrows an Error with a location prefix, keeping its kind and exit code.
[[noreturn]] inline void rethrow_with_context(const Error& e, const std::string& where) {
  std::string msg = e.what();
  const std::string prefix = std::string(to_string(e.kind())) + ": ";
  if (msg.rfind(prefix, 0) == 0) msg.erase(0, prefix.size());
  throw Error(e.kind(), where + ": " + msg);
}

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Each index is processed exactly once;
/// callers write results into slot i so output never depends on scheduling.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::size_t first_index = n;
  std::mutex mu;
  auto body = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        // report the lowest failing index so the surfaced error is schedule-independent
        std::lock_guard lock(mu);
        if (i < first_index) {
          first_index = i;
          first_error = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(body);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

inline std::size_t default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

/// Splits [0, n) into consecutive chunks of `size`; a trailing chunk of one merges into its predecessor.
inline std::vector<std::vector<std::size_t>> chunk(std::span<const std::size_t> order, std::size_t size) {
  if (size < 2) throw ConfigError("batch size must be >= 2");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < order.size(); s += size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + size)));
  if (out.size() >= 2 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

struct Pool {
  std::vector<FeatureRecord> records;
  std::vector<std::size_t> shard_ends;  // records[shard_ends[s-1], shard_ends[s]) came from shard s
  std::uint32_t d_v = 0;
  std::uint32_t d_t = 0;
  bool has_tags = false;
};

inline Pool read_pool(std::span<const fs::path> shards) {
  if (shards.empty()) throw ConfigError("no pool shards given");
  Pool pool;
  for (std::size_t s = 0; s < shards.size(); ++s) {
    try {
      ShardReader r(shards[s]);
      const auto& h = r.header();
      if (s == 0) {
        pool.d_v = h.d_v;
        pool.d_t = h.d_t;
        pool.has_tags = h.has_tags();
      } else if (h.d_v != pool.d_v || h.d_t != pool.d_t) {
        throw ShapeError("shard dims differ from the first pool shard");
      } else {
        pool.has_tags = pool.has_tags && h.has_tags();
      }
      FeatureRecord rec;
      while (r.next(rec)) pool.records.push_back(rec);
    } catch (const Error& e) {
      rethrow_with_context(e, "pool shard " + shards[s].string());
    }
    pool.shard_ends.push_back(pool.records.size());
  }
  return pool;
}

/// First `per_task` records of each evaluation shard; one shard per task.
inline std::vector<std::vector<FeatureRecord>> read_eval(std::span<const fs::path> shards, std::size_t per_task) {
  std::vector<std::vector<FeatureRecord>> tasks;
  for (const auto& path : shards) {
    try {
      ShardReader r(path);
      std::vector<FeatureRecord> task;
      FeatureRecord rec;
      while (task.size() < per_task && r.next(rec)) task.push_back(rec);
      if (!task.empty()) tasks.push_back(std::move(task));
    } catch (const Error& e) {
      rethrow_with_context(e, "eval shard " + path.string());
    }
  }
  return tasks;
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

struct SynthOptions {
  std::size_t pool = 1000;
  std::size_t eval = 200;
  std::uint64_t seed = 0;
  double target_rate = 0.2;
  std::size_t checkpoints = 3;
  std::size_t steps_per_checkpoint = 20;
  double eta = 0.05;
  ClusterWorldSpec world;
};

/// Concept tag per cluster, drawn from the default vocabulary.
inline std::string cluster_tag(std::size_t c) {
  static const char* tags[] = {"Clinical Imaging", "Microscopy", "Plots and Charts", "Tables", "Other"};
  return tags[c % 5];
}

struct SynthOutputs {
  fs::path pool, eval, params, trajectory, labels, config;
};

/// Writes pool.chfs (mixed clusters, tagged), eval.chfs (target cluster 0), a trajectory of
/// SGD checkpoints trained on the pool, the final checkpoint as params.chep, labels.csv and
/// a config.json sized for the synthetic dimensions.
inline SynthOutputs run_synth(const SynthOptions& opt, const fs::path& out_dir) {
  if (!(opt.target_rate >= 0.0 && opt.target_rate <= 1.0)) throw ConfigError("target_rate must be in [0, 1]");
  if (!(opt.eta > 0.0)) throw ConfigError("synth eta must be > 0");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  const ClusterWorld world(opt.world, opt.seed);
  Rng rng(derive_seed(opt.seed, "synth-data"));
  SynthOutputs out{out_dir / "pool.chfs",   out_dir / "eval.chfs",  out_dir / "params.chep",
                   out_dir / "trajectory.chtj", out_dir / "labels.csv", out_dir / "config.json"};

  const auto labels = world.mixed_labels(opt.pool, opt.target_rate, rng);
  const FeatureBatch pool = world.batch(labels, rng, 0);
  const FeatureBatch eval = world.batch(std::vector<std::size_t>(opt.eval, 0), rng, 1'000'000);
  auto to_records = [](const FeatureBatch& b, const std::vector<std::size_t>* tags) {
    std::vector<FeatureRecord> recs(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) {
      recs[i].id = b.ids[i];
      for (double v : b.h.row(i)) recs[i].h.push_back(static_cast<float>(v));
      for (double v : b.t.row(i)) recs[i].t.push_back(static_cast<float>(v));
      if (tags) recs[i].tags = {cluster_tag((*tags)[i])};
    }
    return recs;
  };
  const auto dv = static_cast<std::uint32_t>(opt.world.d_v), dt = static_cast<std::uint32_t>(opt.world.d_t);
  const auto pool_recs = to_records(pool, &labels);
  write_shard(out.pool, dv, dt, pool_recs, true);
  write_shard(out.eval, dv, dt, to_records(eval, nullptr), false);

  // features as stored, so training sees exactly what scoring reads
  const FeatureBatch stored = to_batch(pool_recs);
  fs::remove(out.trajectory, ec);
  CheckpointStore store(out.trajectory);
  EndpointParams params = world.init_params();
  const std::size_t mb = std::min<std::size_t>(64, stored.size());
  for (std::size_t c = 0; c < opt.checkpoints; ++c) {
    if (mb >= 2) {
      for (std::size_t s = 0; s < opt.steps_per_checkpoint; ++s) {
        std::vector<std::size_t> rows(stored.size());
        for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
        rng.shuffle(rows);
        rows.resize(mb);
        const FeatureBatch b = stored.select(rows);
        Vector g = loss_sum_gradient(params, b, forward(params, b));
        Vector flat = params.flatten();
        axpy(-opt.eta / static_cast<double>(mb), g, flat);
        params.assign_flat(flat);
      }
    }
    store.append(params, opt.eta);
  }
  save_params(out.params, params);

  {
    auto f = io::open_out(out.labels);
    f << "id,cluster\n";
    for (std::size_t i = 0; i < labels.size(); ++i) f << pool.ids[i] << ',' << labels[i] << '\n';
    if (!f) throw IoError("failed to write " + out.labels.string());
  }
  {
    RunConfig cfg;
    cfg.seed = opt.seed;
    cfg.batch_size = 64;
    cfg.sketch_k = 256;
    auto f = io::open_out(out.config);
    f << to_json(cfg).dump(2) << '\n';
    if (!f) throw IoError("failed to write " + out.config.string());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

struct ScoreInputs {
  std::vector<fs::path> pool;
  std::vector<fs::path> eval;
  std::optional<fs::path> params;
  std::optional<fs::path> checkpoints;
};

struct ScoreResult {
  ScoreFile scores;
  std::optional<CurvatureSurrogate> surrogate;
  std::optional<DriftReport> drift;
  std::size_t batches = 0;
};

namespace detail {

inline bool needs_eval(Method m) { return is_gradient_method(m); }

inline GradientSpace make_space(const RunConfig& cfg, std::size_t p) {
  if (cfg.exact_space()) {
    if (p > kExactSpaceMaxDim)
      throw ConfigError("exact gradient space needs P <= " + std::to_string(kExactSpaceMaxDim) + ", got " +
                        std::to_string(p));
    return GradientSpace::exact(p);
  }
  return GradientSpace::sketched(cfg.sketch_spec(p));
}

inline std::string describe_space(const GradientSpace& s) {
  return s.is_sketched() ? describe_sketch(s.sketch().spec()) : "exact";
}

inline std::vector<FeatureBatch> pool_batches(const Pool& pool, const RunConfig& cfg,
                                              std::vector<std::vector<std::size_t>>& rows) {
  std::vector<std::size_t> order(pool.records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(cfg.seed, "batch-shuffle"));
  rng.shuffle(order);
  rows = chunk(order, cfg.batch_size);
  std::vector<FeatureBatch> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    std::vector<FeatureRecord> recs;
    recs.reserve(r.size());
    for (auto i : r) recs.push_back(pool.records[i]);
    out.push_back(to_batch(recs));
  }
  return out;
}

/// Evaluation mean gradient (exact space) and prototypes, task shards chunked by batch size.
inline std::pair<Vector, EvalPrototypes> eval_statistics(const EndpointParams& params,
                                                         const std::vector<std::vector<FeatureRecord>>& tasks,
                                                         const RunConfig& cfg) {
  EvalGradientEstimator est(cfg.eval_ema_decay);
  PrototypeAccumulator protos;
  for (const auto& task : tasks) {
    std::vector<std::size_t> order(task.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const auto chunks = order.size() >= 2 ? chunk(order, cfg.batch_size)
                                           : std::vector<std::vector<std::size_t>>{order};
    for (const auto& c : chunks) {
      std::vector<FeatureRecord> recs;
      for (auto i : c) recs.push_back(task[i]);
      const FeatureBatch b = to_batch(recs);
      b.validate(params);
      est.add_batch(params, b);
      protos.add(forward(params, b));
    }
  }
  return {est.value(), protos.finish(cfg.beta)};
}

inline void require_unique_pool_ids(const Pool& pool) {
  std::unordered_set<std::uint64_t> seen;
  seen.reserve(pool.records.size());
  for (const auto& r : pool.records)
    if (!seen.insert(r.id).second) throw DuplicateSample("duplicate sample id " + std::to_string(r.id) + " in pool");
}

inline std::vector<TrajectoryPoint> trajectory_points(const CheckpointTrajectory& traj, std::size_t epochs) {
  std::vector<TrajectoryPoint> pts;
  const std::size_t first = traj.size() > epochs ? traj.size() - epochs : 0;
  for (std::size_t t = first; t < traj.size(); ++t) pts.push_back({&traj[t].params, traj[t].eta});
  return pts;
}

}  // namespace detail

/// Scores every pool sample with the configured method. Records come back in pool input order.
inline ScoreResult run_score(const RunConfig& cfg, const ScoreInputs& in, std::size_t workers,
                             std::ostream* log = nullptr) {
  validate(cfg);
  const Method method = cfg.method;
  auto note = [&](const std::string& s) {
    if (log) *log << "[chips] " << s << '\n';
  };

  std::vector<std::vector<FeatureRecord>> eval_tasks;
  if (detail::needs_eval(method)) {
    eval_tasks = read_eval(in.eval, cfg.eval_samples_per_task);
    if (eval_tasks.empty()) throw ConfigError("evaluation set is empty; " + std::string(to_string(method)) +
                                              " needs evaluation samples");
  }
  std::optional<EndpointParams> params;
  if (method != Method::Random && method != Method::ConceptFilter && method != Method::ConceptBalance) {
    if (!in.params) throw ConfigError(std::string(to_string(method)) + " needs --params");
    try {
      params = load_params(*in.params);
    } catch (const Error& e) {
      rethrow_with_context(e, "params " + in.params->string());
    }
  }

  const Pool pool = read_pool(in.pool);
  if (pool.records.empty()) throw EmptyPool("pool shards contain no samples");
  detail::require_unique_pool_ids(pool);
  const std::uint64_t cfg_fp = fingerprint(cfg);
  ScoreResult result;
  result.scores.method = std::string(to_string(method));
  result.scores.config_fingerprint = cfg_fp;
  result.scores.pool_size = pool.records.size();
  result.scores.sketch = "none";
  note("pool " + std::to_string(pool.records.size()) + " samples, method " + result.scores.method);

  if (method == Method::Random) {
    for (const auto& r : pool.records) result.scores.records.push_back(make_record(r.id, random_key(cfg.seed, r.id), 1.0, 1.0));
    return result;
  }
  if (method == Method::ConceptFilter || method == Method::ConceptBalance) {
    if (!pool.has_tags) throw ConfigError("concept methods need tagged pool shards");
    std::vector<TaggedId> tagged;
    tagged.reserve(pool.records.size());
    for (const auto& r : pool.records) tagged.push_back({r.id, r.tags});
    result.scores.records = concept_scores(tagged, method, cfg.concepts, cfg.seed);
    return result;
  }

  const EndpointParams& prm = *params;
  if (prm.d_v() != pool.d_v || prm.d_t() != pool.d_t)
    throw ShapeError("params expect d_v=" + std::to_string(prm.d_v()) + ", d_t=" + std::to_string(prm.d_t()) +
                     " but pool shards have d_v=" + std::to_string(pool.d_v) + ", d_t=" + std::to_string(pool.d_t));
  std::vector<std::vector<std::size_t>> rows;
  const auto batches = detail::pool_batches(pool, cfg, rows);
  result.batches = batches.size();
  for (std::size_t b = 0; b < batches.size(); ++b)
    if (batches[b].size() < 2) throw InsufficientBatch("scoring batch needs at least 2 samples");
  std::vector<std::vector<ScoreRecord>> slots(batches.size());
  auto scatter = [&] {
    std::vector<ScoreRecord> out(pool.records.size());
    for (std::size_t b = 0; b < batches.size(); ++b)
      for (std::size_t i = 0; i < rows[b].size(); ++i) out[rows[b][i]] = slots[b][i];
    if (cfg.shard_rescale) {
      std::size_t begin = 0;
      for (auto end : pool.shard_ends) {
        shard_rescale(std::span<ScoreRecord>(out).subspan(begin, end - begin));
        begin = end;
      }
    }
    result.scores.records = std::move(out);
  };

  if (method == Method::ClipScore) {
    parallel_for(batches.size(), workers, [&](std::size_t b) {
      const auto g = forward(prm, batches[b]);
      const auto fp = batch_fingerprint(batches[b].ids);
      for (std::size_t i = 0; i < batches[b].size(); ++i)
        slots[b].push_back(make_record(batches[b].ids[i], score_clipscore(g.xhat.row(i), g.yhat.row(i)), 1.0, 1.0, fp));
    });
    scatter();
    return result;
  }

  // gradient methods
  const std::size_t p = prm.param_count();
  const GradientSpace space = detail::make_space(cfg, p);
  result.scores.sketch = detail::describe_space(space);
  const auto [u_exact, protos] = detail::eval_statistics(prm, eval_tasks, cfg);
  const SketchedVector u = space.project(u_exact);
  note("subspace P=" + std::to_string(p) + ", scoring space " + result.scores.sketch);

  auto batch_grads = [&](const EndpointParams& at, const FeatureBatch& b, const BatchGeometry& g) {
    std::vector<SketchedVector> out;
    out.reserve(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) out.push_back(space.project(per_sample_gradient(at, b, g, i)));
    return out;
  };

  if (method == Method::TracIn) {
    if (!in.checkpoints) throw ConfigError("tracin needs --checkpoints");
    CheckpointTrajectory traj;
    try {
      traj = CheckpointStore(*in.checkpoints).load_all();
    } catch (const Error& e) {
      rethrow_with_context(e, "checkpoints " + in.checkpoints->string());
    }
    const auto pts = detail::trajectory_points(traj, cfg.tracin_epochs);
    parallel_for(batches.size(), workers, [&](std::size_t b) {
      const auto s = tracin_batch_scores(pts, batches[b], space, u);
      const auto fp = batch_fingerprint(batches[b].ids);
      for (std::size_t i = 0; i < s.size(); ++i) slots[b].push_back(make_record(batches[b].ids[i], s[i], 1.0, 1.0, fp));
    });
    scatter();
    return result;
  }

  // first pass: curvature moments, reduced in batch order
  std::optional<MomentAccumulator> acc;
  const bool identity_m = method == Method::Chips && cfg.preconditioner == "identity";
  if (method == Method::Trak || (method == Method::Chips && !identity_m)) {
    acc.emplace(space.dim(), space.fingerprint(), cfg.moment_ema_decay);
    const std::size_t wave = std::max<std::size_t>(1, workers) * 2;
    for (std::size_t start = 0; start < batches.size(); start += wave) {
      const std::size_t n = std::min(wave, batches.size() - start);
      std::vector<BatchMoments> moments(n);
      parallel_for(n, workers, [&](std::size_t j) {
        const auto& b = batches[start + j];
        const auto grads = batch_grads(prm, b, forward(prm, b));
        moments[j] = BatchMoments::from_vectors(grads);
      });
      for (auto& m : moments) acc->add(m);
    }
    note("moments from " + std::to_string(acc->count()) + " samples in " + std::to_string(acc->batches()) + " batches");
  }

  SketchedVector dir;
  if (method == Method::Dot) {
    dir = u;
  } else if (method == Method::Trak) {
    const double lt = cfg.lambda_trak.value_or(default_lambda_trak(*acc));
    TrakScorer trak(*acc, lt, u, cfg.cg_options());
    dir = trak.direction();
  } else if (identity_m) {
    CurvatureSurrogate s;
    s.alpha = cfg.alpha;
    s.lambda_ridge = 0.0;
    s.fingerprint = space.fingerprint();
    s.m = DenseMatrix::identity(space.dim());
    s.precond_dir = u.data;
    s.min_eig_lower_bound = 1.0;
    s.min_eig = 1.0;
    result.surrogate = std::move(s);
    dir = u;
  } else {
    const double lambda = cfg.lambda_ridge.value_or(default_ridge(*acc, cfg.alpha));
    std::optional<DenseMatrix> ridge;
    const bool exact_ridge = cfg.ridge == "exact" || (cfg.ridge == "auto" && p <= kExactSpaceMaxDim);
    if (space.is_sketched() && exact_ridge) ridge = sketch_gram(space.sketch());
    auto surr = build_surrogate(*acc, cfg.alpha, lambda, ridge ? &*ridge : nullptr);
    auto opts = cfg.cg_options();
    if (cfg.cg_jacobi) {
      opts.jacobi_diagonal.resize(surr.m.rows());
      for (std::size_t i = 0; i < surr.m.rows(); ++i) opts.jacobi_diagonal[i] = surr.m(i, i);
    }
    solve_direction(surr, u, opts);
    note("curvature solve: lambda=" + format_double(lambda) + ", cg iterations " +
         std::to_string(surr.cg_report.iterations) + ", residual " + format_double(surr.cg_report.residual_norm));
    dir = direction_vector(surr);
    result.surrogate = std::move(surr);
  }

  // second pass: per-sample utility
  const bool chips = method == Method::Chips;
  parallel_for(batches.size(), workers, [&](std::size_t b) {
    const auto& batch = batches[b];
    const auto g = forward(prm, batch);
    const auto grads = batch_grads(prm, batch, g);
    const auto fp = batch_fingerprint(batch.ids);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const double a = alignment_score(grads[i], dir);
      const double wl = chips ? learnability_weight(g, i, cfg.ablation) : 1.0;
      const double wr = chips && cfg.ablation == Ablation::Full ? relevance(g.xhat.row(i), g.yhat.row(i), protos) : 1.0;
      slots[b].push_back(make_record(batch.ids[i], a, wl, wr, fp));
    }
  });
  scatter();
  if (chips) {
    try {
      result.drift = drift_diagnostics(result.scores.records);
      note("drift KL " + format_double(result.drift->kl) + " nats, ratio [" + format_double(result.drift->min_ratio) +
           ", " + format_double(result.drift->max_ratio) + "], excluded " + std::to_string(result.drift->excluded));
    } catch (const DegenerateDistribution&) {
      note("drift undefined: no record has a positive base weight");
    }
  }
  return result;
}

/// Path of the persisted curvature surrogate next to a score file.
inline fs::path surrogate_path(const fs::path& scores) {
  fs::path p = scores;
  p.replace_extension(".chcv");
  return p;
}

/// Writes the score file (binary when the extension is .chsc) and the surrogate if any.
inline void save_score_result(const ScoreResult& r, const fs::path& out) {
  if (out.extension() == ".chsc")
    save_scores_binary(out, r.scores);
  else
    save_scores_text(out, r.scores);
  if (r.surrogate) save_surrogate(surrogate_path(out), *r.surrogate);
}

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

/// Manifest for one retention ratio. drift_kl_upper carries the measured soft-distribution KL,
/// or the analytic bound 1 when the distribution is undefined.
inline SelectionManifest run_select(const ScoreFile& sf, double retention) {
  auto m = utility_and_select(sf.records, retention, sf.pool_size ? sf.pool_size : sf.records.size());
  m.method = sf.method;
  m.config_fingerprint = sf.config_fingerprint;
  try {
    m.drift_kl_upper = drift_diagnostics(sf.records).kl;
  } catch (const DegenerateDistribution&) {
    m.drift_kl_upper = 1.0;
  }
  return m;
}

inline std::string manifest_name(double r) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "manifest-r%.2f.txt", r);
  return buf;
}

/// One manifest per retention; a single retention writes `out` itself, a grid writes into directory `out`.
inline std::vector<fs::path> run_select_files(const fs::path& scores, std::span<const double> retentions,
                                              const fs::path& out, bool single_file) {
  ScoreFile sf;
  try {
    sf = load_scores(scores);
  } catch (const Error& e) {
    rethrow_with_context(e, "scores " + scores.string());
  }
  std::vector<fs::path> written;
  if (!single_file) {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  }
  for (double r : retentions) {
    const fs::path path = single_file ? out : out / manifest_name(r);
    save_manifest(path, run_select(sf, r));
    written.push_back(path);
  }
  return written;
}

}  // namespace chips::pipeline
