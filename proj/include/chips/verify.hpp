#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "chips/curvature.hpp"
#include "chips/endpoint.hpp"
#include "chips/flops.hpp"
#include "chips/io.hpp"
#include "chips/numerics.hpp"
#include "chips/pipeline.hpp"
#include "chips/scoring.hpp"
#include "chips/theorylab.hpp"

/// Named end-to-end checks. Each returns a pass flag plus a JSON record of what was measured.
namespace chips::verify {

namespace fs = std::filesystem;

struct CheckResult {
  std::string name;
  bool pass = false;
  double seconds = 0.0;
  double time_limit = 0.0;  // seconds; 0 means unbounded
  nlohmann::json detail;

  nlohmann::json to_json() const {
    nlohmann::json j{{"check", name}, {"pass", pass}, {"seconds", seconds}, {"detail", detail}};
    if (time_limit > 0.0) j["time_limit"] = time_limit;
    return j;
  }
};

struct CheckOptions {
  std::uint64_t seed = 0;
  fs::path work_dir = fs::temp_directory_path() / "chips-verify";
  std::size_t workers = 4;
};

namespace detail {

/// Times body(); pass requires the numeric verdict and, when a limit is set, the runtime bound.
inline CheckResult timed(const std::string& name, double limit, const std::function<bool(nlohmann::json&)>& body) {
  CheckResult r;
  r.name = name;
  r.time_limit = limit;
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = false;
  try {
    ok = body(r.detail);
  } catch (const std::exception& e) {
    r.detail["error"] = e.what();
    ok = false;
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.detail["numeric_pass"] = ok;
  r.pass = ok && (limit <= 0.0 || r.seconds < limit);
  return r;
}

inline std::string file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Gradient oracle
// ---------------------------------------------------------------------------

/// Max over samples of ||g_analytic - g_fd||_inf / ||g_fd||_inf, central differences with step h.
inline double gradient_fd_error(const EndpointParams& params, const FeatureBatch& batch, double h = 1e-5) {
  const std::size_t p = params.param_count(), b = batch.size();
  const auto geom = forward(params, batch);
  const Vector theta = params.flatten();
  DenseMatrix fd(b, p);
  EndpointParams q = params;
  Vector t = theta;
  for (std::size_t j = 0; j < p; ++j) {
    t[j] = theta[j] + h;
    q.assign_flat(t);
    const Vector lp = symmetric_infonce(forward(q, batch));
    t[j] = theta[j] - h;
    q.assign_flat(t);
    const Vector lm = symmetric_infonce(forward(q, batch));
    t[j] = theta[j];
    for (std::size_t i = 0; i < b; ++i) fd(i, j) = (lp[i] - lm[i]) / (2.0 * h);
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const Vector g = per_sample_gradient(params, batch, geom, i);
    double num = 0.0, den = 0.0;
    for (std::size_t j = 0; j < p; ++j) {
      num = std::max(num, std::abs(g[j] - fd(i, j)));
      den = std::max(den, std::abs(fd(i, j)));
    }
    worst = std::max(worst, den > 0.0 ? num / den : num);
  }
  return worst;
}

/// Seeded random instance with B <= 8 and every width <= 16.
inline std::pair<EndpointParams, FeatureBatch> gradient_instance(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "gradient-instance"));
  const std::size_t b = 2 + rng.below(7), d = 2 + rng.below(15), dv = 2 + rng.below(15), dt = 2 + rng.below(15);
  EndpointParams p(dv, dt, d, std::log(1.0 + 9.0 * rng.uniform()));
  p.w_v = random_normal_matrix(rng, dv, d, 1.0 / std::sqrt(double(dv)));
  p.w_t = random_normal_matrix(rng, dt, d, 1.0 / std::sqrt(double(dt)));
  FeatureBatch batch;
  for (std::size_t i = 0; i < b; ++i) batch.ids.push_back(i);
  batch.h = random_normal_matrix(rng, b, dv);
  batch.t = random_normal_matrix(rng, b, dt);
  return {p, batch};
}

inline CheckResult check_gradient_oracle(const CheckOptions& o) {
  return detail::timed("gradient-oracle", 10.0, [&](nlohmann::json& d) {
    double worst = 0.0;
    for (std::size_t s = 0; s < 50; ++s) {
      const auto [p, b] = gradient_instance(hash_combine(o.seed, s));
      worst = std::max(worst, gradient_fd_error(p, b));
    }
    d["instances"] = 50;
    d["max_rel_error"] = worst;
    d["threshold"] = 1e-5;
    return worst <= 1e-5;
  });
}

// ---------------------------------------------------------------------------
// FLOPs
// ---------------------------------------------------------------------------

inline CheckResult check_flops(const CheckOptions&) {
  return detail::timed("flops-exactness", 1.0, [&](nlohmann::json& d) {
    using flops::u128;
    const flops::CostModel m;
    const auto tr = flops::primitives(m, m.b_train);
    const auto ev = flops::primitives(m, m.b_eval);
    struct Row {
      const char* name;
      u128 got;
      std::uint64_t want;
    };
    const Row rows[] = {
        {"train.lin", tr.lin, 42949672960ULL},   {"train.norm", tr.norm, 100663296ULL},
        {"train.mm", tr.mm, 1099511627776ULL},   {"train.fwd", tr.fwd, 2242073591808ULL},
        {"train.bwd", tr.bwd, 4483945857024ULL}, {"train.fb", tr.fb, 6726019448832ULL},
        {"train.jvp", tr.jvp, 4484147183616ULL}, {"eval.lin", ev.lin, 4456448000ULL},
        {"eval.norm", ev.norm, 10444800ULL},     {"eval.mm", ev.mm, 11837440000ULL},
        {"eval.fwd", ev.fwd, 28141772800ULL},    {"eval.bwd", ev.bwd, 56262656000ULL},
        {"eval.fb", ev.fb, 84404428800ULL},      {"eval.jvp", ev.jvp, 56283545600ULL},
        {"proto_eval", flops::proto_eval(m), 4466892800ULL},
    };
    bool ok = true;
    for (const auto& r : rows) {
      d["primitives"][r.name] = flops::to_string(r.got);
      ok = ok && r.got == r.want;
    }
    const std::pair<flops::Method, const char*> totals[] = {
        {flops::Method::TracIn, "5.258869e16"}, {flops::Method::Trak, "5.094585e16"}, {flops::Method::Chips, "5.094747e16"}};
    for (const auto& [meth, want] : totals) {
      const auto t = flops::method_total(m, meth);
      const auto printed = flops::format_sig(t, 7);
      d["totals"][std::string(flops::to_string(meth))] = {{"exact", flops::to_string(t)}, {"printed", printed}};
      ok = ok && printed == want;
    }
    d["c_neg"] = m.c_neg;
    return ok;
  });
}

// ---------------------------------------------------------------------------
// Correlation bound
// ---------------------------------------------------------------------------

inline CheckResult check_correlation_bound(const CheckOptions& o) {
  return detail::timed("correlation-bound", 60.0, [&](nlohmann::json& d) {
    bool ok = true;
    double min_margin = 1e300;
    for (std::size_t w = 0; w < 20; ++w) {
      const std::uint64_t s = hash_combine(o.seed, w);
      const auto world = theory::make_linearized_world({}, s);
      const auto rep = theory::verify_linearized_correlation(world, 10000, s);
      d["worlds"].push_back({{"rho_hat", rep.rho_hat}, {"bound", rep.bound.main}, {"fallback", rep.bound.fallback},
                             {"se", rep.se}, {"lambda_min", rep.bound.lambda_min_sym_b}});
      ok = ok && rep.holds && rep.fallback_below && rep.bound.main <= 1.0 + 1e-12;
      min_margin = std::min(min_margin, rep.rho_hat - (rep.bound.main - 3.0 * rep.se));
    }
    d["min_margin"] = min_margin;
    const auto id = theory::verify_linearized_correlation(theory::make_identity_world(16, o.seed), 10000, o.seed);
    d["identity"] = {{"rho_hat", id.rho_hat}, {"bound", id.bound.main}};
    ok = ok && std::abs(id.rho_hat - 1.0) < 1e-12 && std::abs(id.bound.main - 1.0) < 1e-12;
    return ok;
  });
}

// ---------------------------------------------------------------------------
// Projection variance and curvature bias
// ---------------------------------------------------------------------------

inline CheckResult check_sketch_variance(const CheckOptions& o) {
  return detail::timed("sketch-variance", 300.0, [&](nlohmann::json& d) {
    theory::CurvatureWorldSpec small;  // P = 128
    const auto w = theory::make_curvature_world(small, o.seed);
    const std::vector<double> grid{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.8, 1.0};
    const auto bias = theory::verify_bias(w, grid);
    d["bias_at_alpha_star"] = bias.bias_at_alpha_star;
    d["bias_monotone"] = bias.monotone;
    for (const auto& pt : bias.points) d["bias"].push_back({{"alpha", pt.alpha}, {"gap", pt.gap}, {"bias", pt.bias}});
    const std::vector<std::uint32_t> full{static_cast<std::uint32_t>(small.p)};
    const auto ortho = theory::verify_projection_variance(w, w.alpha_star, SketchKind::Srht, full, 20, o.seed);
    d["srht_k_eq_p_variance"] = ortho.points[0].variance;

    theory::CurvatureWorldSpec big;
    big.p = 1024;
    big.population = 64;
    big.queries = 16;
    const auto wb = theory::make_curvature_world(big, o.seed + 1);
    const std::vector<std::uint32_t> ks{64, 128, 256, 512};
    const auto var = theory::verify_projection_variance(wb, wb.alpha_star, SketchKind::CountSketch, ks, 200, o.seed);
    for (const auto& pt : var.points)
      d["variance"].push_back({{"k", pt.k}, {"variance", pt.variance}, {"mse", pt.mse}, {"mse_se", pt.mse_se}});
    d["slope"] = var.slope;
    d["mse_monotone"] = var.mse_monotone;
    const double scale = std::abs(dot(w.queries.row(0), w.reference_dir)) + 1.0;
    return bias.bias_at_alpha_star <= 1e-10 && bias.monotone && std::abs(var.slope + 1.0) <= 0.3 &&
           var.mse_monotone && ortho.points[0].variance <= 1e-20 * scale * scale;
  });
}

// ---------------------------------------------------------------------------
// Drift on a scored synthetic pool
// ---------------------------------------------------------------------------

inline CheckResult check_drift(const CheckOptions& o) {
  return detail::timed("drift-bound", 0.0, [&](nlohmann::json& d) {
    pipeline::SynthOptions so;
    so.pool = 10000;
    so.eval = 200;
    so.seed = o.seed;
    const auto dir = o.work_dir / "drift";
    const auto out = pipeline::run_synth(so, dir);
    RunConfig cfg = load_config(out.config);
    pipeline::ScoreInputs in{{out.pool}, {out.eval}, out.params, std::nullopt};
    const auto res = pipeline::run_score(cfg, in, o.workers);
    if (!res.drift) return false;
    const auto& dr = *res.drift;
    d["kl"] = dr.kl;
    d["min_ratio"] = dr.min_ratio;
    d["max_ratio"] = dr.max_ratio;
    d["included"] = dr.included;
    d["excluded"] = dr.excluded;
    const double e = std::exp(1.0);
    return dr.kl <= 1.0 && dr.min_ratio >= 1.0 / e && dr.max_ratio <= e;
  });
}

// ---------------------------------------------------------------------------
// Batch moments
// ---------------------------------------------------------------------------

inline CheckResult check_batch_moments(const CheckOptions& o) {
  return detail::timed("batch-moments", 30.0, [&](nlohmann::json& d) {
    const auto pop = theory::toy_gradient_population({}, o.seed);
    bool ok = true;
    for (std::size_t b : {1, 4, 8}) {
      const auto r = theory::verify_batch_moments(pop, b, 100000, hash_combine(o.seed, b));
      d["batches"].push_back({{"B", b}, {"monte_carlo", r.monte_carlo}, {"closed_form", r.closed_form}, {"rel_err", r.rel_err}});
      ok = ok && r.rel_err <= 0.02;
    }
    // identical gradients: every draw equals g_q exactly
    DenseMatrix same(16, pop.cols());
    for (std::size_t r = 0; r < same.rows(); ++r) std::copy(pop.row(0).begin(), pop.row(0).end(), same.row(r).begin());
    const auto z = theory::verify_batch_moments(same, 8, 1000, o.seed);
    d["zero_covariance_rel_err"] = z.rel_err;
    return ok && z.rel_err <= 1e-12;
  });
}

// ---------------------------------------------------------------------------
// One-step descent
// ---------------------------------------------------------------------------

inline CheckResult check_descent(const CheckOptions& o) {
  return detail::timed("descent", 60.0, [&](nlohmann::json& d) {
    const theory::ToySpec spec;
    const auto rep = theory::verify_descent(spec, 50, o.seed);
    d["trials"] = rep.trials;
    d["wins"] = rep.wins;
    d["fraction"] = rep.fraction;
    d["mean_diff"] = rep.mean_diff;
    const auto zero = theory::verify_descent(spec, 50, o.seed, true);
    d["zero_u_mean_diff"] = zero.mean_diff;
    d["zero_u_se"] = zero.se_diff;
    // training on the evaluation set itself descends its own loss
    theory::Toy toy = theory::make_toy(spec, o.seed);
    toy.pool = toy.eval;
    const auto self = theory::descent_trial(toy, toy.pool.size(), o.seed);
    d["self_delta"] = self.dl_aligned;
    return rep.fraction >= 0.8 && std::abs(zero.mean_diff) <= 3.0 * zero.se_diff && self.dl_aligned < 0.0;
  });
}

// ---------------------------------------------------------------------------
// Proxy fidelity
// ---------------------------------------------------------------------------

inline CheckResult check_proxy_fidelity(const CheckOptions& o) {
  return detail::timed("proxy-fidelity", 0.0, [&](nlohmann::json& d) {
    std::vector<double> rhos;
    for (std::size_t s = 0; s < 10; ++s) {
      const auto r = theory::proxy_fidelity(hash_combine(o.seed, s));
      rhos.push_back(r.spearman);
      d["spearman"].push_back(r.spearman);
    }
    const double m = mean(rhos);
    d["mean"] = m;
    d["min"] = *std::min_element(rhos.begin(), rhos.end());
    return m >= 0.7;
  });
}

// ---------------------------------------------------------------------------
// Oracle equivalences
// ---------------------------------------------------------------------------

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  require_same_size(a.size(), b.size(), "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline CheckResult check_oracles(const CheckOptions& o) {
  return detail::timed("oracle-equivalences", 0.0, [&](nlohmann::json& d) {
    Rng rng(derive_seed(o.seed, "oracles"));
    // CG against a dense Cholesky solve
    const DenseMatrix a = random_spd(rng, 64, 0.5);
    const Vector b = random_normal_vector(rng, 64);
    CgOptions opts;
    opts.max_iters = 500;
    opts.tol = 1e-14;
    const auto cg = cg_solve(a, b, opts);
    const Vector dense = cholesky_solve(cholesky(a), b);
    const double cg_err = max_abs_diff(cg.x, dense);
    d["cg_vs_dense"] = cg_err;

    // accumulated moments against the O(N^2) pair loop
    const std::size_t n = 50, p = 8;
    const DenseMatrix g = random_normal_matrix(rng, n, p);
    MomentAccumulator acc(p, exact_space_fingerprint(p));
    acc.accumulate(g);
    DenseMatrix pos(p, p), neg(p, p);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t r = 0; r < p; ++r)
          for (std::size_t c = 0; c < p; ++c) {
            if (i == j)
              pos(r, c) += g(i, r) * g(i, c) / double(n);
            else
              neg(r, c) += g(i, r) * g(j, c) / double(n * (n - 1));
          }
    const double mom_err = std::max(max_abs_diff(acc.phi_pos().flat(), pos.flat()), max_abs_diff(acc.phi_neg().flat(), neg.flat()));
    d["moments_vs_loop"] = mom_err;

    // partial selection against a full sort, with ties
    std::vector<ScoreRecord> recs(100000);
    for (std::size_t i = 0; i < recs.size(); ++i)
      recs[i] = make_record(i, std::floor(rng.normal() * 1000.0) / 1000.0, 1.0, 1.0);
    std::vector<ScoreRecord> sorted = recs;
    std::sort(sorted.begin(), sorted.end(), ranks_before);
    bool topn_ok = true;
    for (std::size_t k : {0, 1, 100, 10000, 99999, 100000}) {
      const auto t = top_n(recs, k);
      for (std::size_t i = 0; i < k; ++i) topn_ok = topn_ok && t[i].id == sorted[i].id;
    }
    d["topn_matches_sort"] = topn_ok;

    // CHIPS with M = I against Dot
    pipeline::SynthOptions so;
    so.pool = 1000;
    so.seed = o.seed;
    const auto out = pipeline::run_synth(so, o.work_dir / "oracle");
    RunConfig cfg = load_config(out.config);
    cfg.method = Method::Chips;
    cfg.preconditioner = "identity";
    cfg.ablation = Ablation::AlignmentOnly;
    const pipeline::ScoreInputs in{{out.pool}, {out.eval}, out.params, std::nullopt};
    const auto chips_m1 = pipeline::run_score(cfg, in, o.workers);
    cfg.method = Method::Dot;
    cfg.preconditioner = "curvature";
    cfg.ablation = Ablation::Full;
    const auto dot = pipeline::run_score(cfg, in, o.workers);
    const auto ra = utility_and_select(chips_m1.scores.records, 1.0).ids;
    const auto rb = utility_and_select(dot.scores.records, 1.0).ids;
    d["identity_equals_dot"] = ra == rb;
    return cg_err <= 1e-8 && mom_err <= 1e-12 && topn_ok && ra == rb;
  });
}

// ---------------------------------------------------------------------------
// Determinism across runs and worker counts
// ---------------------------------------------------------------------------

/// synth, score and select into `dir`; returns the bytes of every output.
inline std::vector<std::string> replay(const fs::path& dir, std::uint64_t seed, std::size_t workers, Method method) {
  pipeline::SynthOptions so;
  so.pool = 1000;
  so.seed = seed;
  const auto out = pipeline::run_synth(so, dir);
  RunConfig cfg = load_config(out.config);
  cfg.method = method;
  const pipeline::ScoreInputs in{{out.pool}, {out.eval}, out.params, out.trajectory};
  const auto res = pipeline::run_score(cfg, in, workers);
  pipeline::save_score_result(res, dir / "scores.csv");
  const auto manifests = pipeline::run_select_files(dir / "scores.csv", cfg.retention_grid, dir / "manifests", false);
  std::vector<std::string> bytes;
  for (const auto& p : {out.pool, out.eval, out.params, out.trajectory, dir / "scores.csv"}) bytes.push_back(detail::file_bytes(p));
  if (res.surrogate) bytes.push_back(detail::file_bytes(pipeline::surrogate_path(dir / "scores.csv")));
  for (const auto& m : manifests) bytes.push_back(detail::file_bytes(m));
  return bytes;
}

inline CheckResult check_determinism(const CheckOptions& o) {
  return detail::timed("determinism", 0.0, [&](nlohmann::json& d) {
    bool ok = true;
    for (Method m : {Method::Chips, Method::Trak, Method::TracIn}) {
      const auto a = replay(o.work_dir / "replay-a", o.seed, 1, m);
      const auto b = replay(o.work_dir / "replay-b", o.seed, 1, m);
      const auto c = replay(o.work_dir / "replay-c", o.seed, 4, m);
      const bool same = a == b && a == c;
      d[std::string(to_string(m))] = {{"files", a.size()}, {"identical", same}};
      ok = ok && same;
    }
    return ok;
  });
}

// ---------------------------------------------------------------------------
// AdamW first-order prediction
// ---------------------------------------------------------------------------

inline CheckResult check_adamw(const CheckOptions& o) {
  return detail::timed("adamw", 0.0, [&](nlohmann::json& d) {
    const std::vector<double> etas{1e-2, 1e-3, 1e-4};
    bool ok = true;
    for (std::size_t s = 0; s < 3; ++s) {
      const auto rep = theory::verify_adamw({}, hash_combine(o.seed, s), etas);
      for (double r : rep.ratios) {
        d["ratios"].push_back(r);
        ok = ok && r >= 50.0 && r <= 200.0;
      }
    }
    return ok;
  });
}

// ---------------------------------------------------------------------------

struct NamedCheck {
  const char* name;
  CheckResult (*run)(const CheckOptions&);
};

inline const std::vector<NamedCheck>& registry() {
  static const std::vector<NamedCheck> checks{
      {"gradient-oracle", check_gradient_oracle}, {"flops-exactness", check_flops},
      {"correlation-bound", check_correlation_bound},               {"sketch-variance", check_sketch_variance},
      {"drift-bound", check_drift},               {"batch-moments", check_batch_moments},
      {"descent", check_descent},                 {"proxy-fidelity", check_proxy_fidelity},
      {"oracle-equivalences", check_oracles},     {"determinism", check_determinism},
      {"adamw", check_adamw},
  };
  return checks;
}

inline CheckResult run_check(const std::string& name, const CheckOptions& o) {
  for (const auto& c : registry())
    if (name == c.name) return c.run(o);
  throw ConfigError("unknown check '" + name + "'");
}

}  // namespace chips::verify
