#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "chips/curvature.hpp"
#include "chips/endpoint.hpp"
#include "chips/errors.hpp"
#include "chips/numerics.hpp"
#include "chips/sketch.hpp"
#include "chips/synth.hpp"

/// Synthetic worlds with known ground truth for checking the descent, correlation and
/// sketch-error statements as statistical assertions.
namespace chips::theory {

// ===========================================================================
// Linearized proxy/full world and the correlation lower bound
// ===========================================================================

/// grad_theta l(z) = J g(z) + r(z),  u = Jbar u_sub + eps,  g ~ N(mu_g, Sigma_g),  r ~ N(0, sigma_r^2 I).
struct LinearizedWorld {
  DenseMatrix j;       // P_full x P
  DenseMatrix jbar;    // P_full x P
  Vector eps;          // P_full
  double residual_sigma = 0.0;
  DenseMatrix sigma_g; // P x P
  Vector mu_g;         // P
  Vector u_sub;        // P
};

struct LinearizedWorldSpec {
  std::size_t p = 16;
  std::size_t p_full = 64;
  double jbar_perturb = 0.3;   // relative size of Jbar - J
  double residual_sigma = 0.3;
  double eps_scale = 0.5;
};

/// The antisymmetric coupling A = (J^T Jbar - Jbar^T J)/2 is cancelled by the J-range part of
/// eps (J^T eps = -A u_sub), so the mismatch zeta = r^T (Jbar u + eps) is exactly uncorrelated with g.
inline LinearizedWorld make_linearized_world(const LinearizedWorldSpec& spec, std::uint64_t seed) {
  if (spec.p_full < spec.p) throw ConfigError("P_full must be >= P");
  Rng rng(derive_seed(seed, "linearized-world"));
  const std::size_t p = spec.p, pf = spec.p_full;
  LinearizedWorld w;
  w.j = random_normal_matrix(rng, pf, p, 1.0 / std::sqrt(double(pf)));
  w.jbar = w.j;
  const DenseMatrix pert = random_normal_matrix(rng, pf, p, spec.jbar_perturb / std::sqrt(double(pf)));
  axpy(1.0, pert.flat(), w.jbar.flat());
  w.residual_sigma = spec.residual_sigma;
  w.sigma_g = random_spd(rng, p, 0.2);
  w.mu_g = random_normal_vector(rng, p, 0.5);
  w.u_sub = random_normal_vector(rng, p);

  const DenseMatrix jt = w.j.transposed();
  const DenseMatrix jtj = matmul(jt, w.j);
  const DenseMatrix jtjb = matmul(jt, w.jbar);
  DenseMatrix a(p, p);
  for (std::size_t r = 0; r < p; ++r)
    for (std::size_t c = 0; c < p; ++c) a(r, c) = 0.5 * (jtjb(r, c) - jtjb(c, r));
  const DenseMatrix l = cholesky(jtj);
  // eps_perp: random vector with its J-range component removed
  Vector e = random_normal_vector(rng, pf, spec.eps_scale / std::sqrt(double(pf)));
  const Vector coef = cholesky_solve(l, matvec(jt, e));
  const Vector proj = matvec(w.j, coef);
  axpy(-1.0, proj, e);
  // eps = eps_perp - J (J^T J)^{-1} A u
  const Vector au = matvec(a, w.u_sub);
  const Vector c2 = cholesky_solve(l, au);
  const Vector jc2 = matvec(w.j, c2);
  axpy(-1.0, jc2, e);
  w.eps = std::move(e);
  return w;
}

/// J = Jbar = I, eps = 0, r = 0: the proxy is exact.
inline LinearizedWorld make_identity_world(std::size_t p, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "identity-world"));
  LinearizedWorld w;
  w.j = DenseMatrix::identity(p);
  w.jbar = DenseMatrix::identity(p);
  w.eps = Vector(p);
  w.sigma_g = random_spd(rng, p, 0.2);
  w.mu_g = random_normal_vector(rng, p, 0.5);
  w.u_sub = random_normal_vector(rng, p);
  return w;
}

struct LinearizedBound {
  double lambda_min_sym_b = 0.0;
  double norm_b = 0.0;
  double sigma_zeta2 = 0.0;
  double u_sigma_u = 0.0;
  double main = 0.0;
  double fallback = 0.0;
};

/// lambda_min(sym B) / sqrt(||B||^2 + sigma_zeta^2 / (u^T Sigma_g u))
inline double correlation_bound(double lambda_min, double norm_b, double sigma_zeta2, double u_sigma_u) {
  return lambda_min / std::sqrt(norm_b * norm_b + sigma_zeta2 / u_sigma_u);
}

/// (lambda_min ||a|| - sigma_zeta) / (||B|| ||a|| + sigma_zeta), ||a||^2 = u^T Sigma_g u
inline double fallback_bound(double lambda_min, double norm_b, double sigma_zeta2, double u_sigma_u) {
  const double a = std::sqrt(u_sigma_u), s = std::sqrt(sigma_zeta2);
  return (lambda_min * a - s) / (norm_b * a + s);
}

/// B = Sigma_g^{1/2} S Sigma_g^{-1/2} with S = sym(J^T Jbar).
inline DenseMatrix whitened_coupling(const LinearizedWorld& w) {
  const DenseMatrix s = symmetrized(matmul(w.j.transposed(), w.jbar));
  const DenseMatrix half = symmetric_function(w.sigma_g, [](double x) { return std::sqrt(x); });
  const DenseMatrix inv_half = symmetric_function(w.sigma_g, [](double x) { return 1.0 / std::sqrt(x); });
  return matmul(matmul(half, s), inv_half);
}

inline LinearizedBound linearized_bound(const LinearizedWorld& w) {
  LinearizedBound b;
  b.u_sigma_u = dot(w.u_sub, matvec(w.sigma_g, w.u_sub));
  if (!(b.u_sigma_u > 0.0)) throw DegenerateWorld("u^T Sigma_g u is zero");
  const DenseMatrix bm = whitened_coupling(w);
  b.lambda_min_sym_b = rayleigh_min_sym(bm);
  b.norm_b = spectral_norm(bm);
  Vector wv = matvec(w.jbar, w.u_sub);
  axpy(1.0, w.eps, wv);
  b.sigma_zeta2 = w.residual_sigma * w.residual_sigma * dot(wv, wv);
  b.main = correlation_bound(b.lambda_min_sym_b, b.norm_b, b.sigma_zeta2, b.u_sigma_u);
  b.fallback = fallback_bound(b.lambda_min_sym_b, b.norm_b, b.sigma_zeta2, b.u_sigma_u);
  return b;
}

struct LinearizedReport {
  LinearizedBound bound;
  double rho_hat = 0.0;
  double se = 0.0;
  std::size_t samples = 0;
  bool holds = false;          // rho_hat >= main - 3 se
  bool fallback_below = true;  // fallback <= main whenever lambda_min >= 0
};

/// Monte-Carlo Pearson correlation of X = g^T u_sub and Y = grad_theta^T u.
inline LinearizedReport verify_linearized_correlation(const LinearizedWorld& w, std::size_t samples, std::uint64_t seed) {
  if (samples < 3) throw ConfigError("correlation check needs at least 3 samples");
  LinearizedReport rep;
  rep.bound = linearized_bound(w);
  rep.samples = samples;
  const std::size_t p = w.u_sub.size(), pf = w.j.rows();
  const DenseMatrix l = cholesky(w.sigma_g);
  Vector wv = matvec(w.jbar, w.u_sub);
  axpy(1.0, w.eps, wv);
  const Vector jtw = matvec(w.j.transposed(), wv);
  Rng rng(derive_seed(seed, "correlation-samples"));
  std::vector<double> xs(samples), ys(samples);
  Vector n(p), g(p);
  for (std::size_t s = 0; s < samples; ++s) {
    for (auto& v : n) v = rng.normal();
    for (std::size_t r = 0; r < p; ++r) {
      double acc = w.mu_g[r];
      for (std::size_t c = 0; c <= r; ++c) acc += l(r, c) * n[c];
      g[r] = acc;
    }
    double rterm = 0.0;
    if (w.residual_sigma > 0.0)
      for (std::size_t r = 0; r < pf; ++r) rterm += w.residual_sigma * rng.normal() * wv[r];
    xs[s] = dot(g, w.u_sub);
    ys[s] = dot(g, jtw) + rterm;
  }
  rep.rho_hat = pearson(xs, ys);
  rep.se = (1.0 - rep.rho_hat * rep.rho_hat) / std::sqrt(double(samples));
  // 1e-12 absorbs round-off when the proxy is exact (rho = bound = 1)
  rep.holds = rep.rho_hat >= rep.bound.main - 3.0 * rep.se - 1e-12;
  rep.fallback_below = rep.bound.lambda_min_sym_b < 0.0 || rep.bound.fallback <= rep.bound.main + 1e-15;
  return rep;
}

// ===========================================================================
// Curvature mixing: projection variance and curvature bias
// ===========================================================================

/// A gradient population with exactly known moments. The reference curvature is the
/// alpha_star mixture, H = (1 - a*) Phi_pos + a* Phi_neg, and A*(z) = g^T (H + lambda I)^{-1} u.
struct CurvatureWorld {
  DenseMatrix phi_pos;
  DenseMatrix phi_neg;
  double alpha_star = 0.3;
  double lambda_ridge = 0.0;
  DenseMatrix h;          // reference curvature
  Vector u;
  Vector reference_dir;   // (H + lambda I)^{-1} u
  DenseMatrix queries;    // n_query x P test gradients
  std::size_t population = 0;
};

struct CurvatureWorldSpec {
  std::size_t p = 128;
  std::size_t population = 256;
  std::size_t queries = 32;
  double alpha_star = 0.3;
  double mean_scale = 0.6;  // shared mean creates cross mass
};

inline Vector solve_spd(const DenseMatrix& m, std::span<const double> b) {
  return cholesky_solve(cholesky(m), b);
}

inline DenseMatrix mix(const DenseMatrix& pos, const DenseMatrix& neg, double alpha, double lambda) {
  DenseMatrix m(pos.rows(), pos.cols());
  for (std::size_t i = 0; i < m.flat().size(); ++i)
    m.flat()[i] = (1.0 - alpha) * pos.flat()[i] + alpha * neg.flat()[i];
  for (std::size_t i = 0; i < m.rows(); ++i) m(i, i) += lambda;
  return m;
}

inline CurvatureWorld make_curvature_world(const CurvatureWorldSpec& spec, std::uint64_t seed) {
  if (spec.population < 2) throw ConfigError("population needs at least 2 gradients");
  Rng rng(derive_seed(seed, "curvature-world"));
  const std::size_t p = spec.p;
  const Vector mu = random_normal_vector(rng, p, spec.mean_scale / std::sqrt(double(p)));
  // anisotropic per-coordinate scales
  Vector scales(p);
  for (std::size_t i = 0; i < p; ++i) scales[i] = std::exp(-2.0 * double(i) / double(p)) / std::sqrt(double(p));
  auto draw = [&](DenseMatrix& out) {
    for (std::size_t r = 0; r < out.rows(); ++r)
      for (std::size_t c = 0; c < p; ++c) out(r, c) = mu[c] + scales[c] * rng.normal();
  };
  DenseMatrix pop(spec.population, p);
  draw(pop);
  MomentAccumulator acc(p, exact_space_fingerprint(p));
  acc.accumulate(pop);

  CurvatureWorld w;
  w.population = spec.population;
  w.alpha_star = spec.alpha_star;
  w.phi_pos = acc.phi_pos();
  w.phi_neg = acc.phi_neg();
  // lambda_min(Phi_neg) >= -||Phi_pos|| / (N - 1), so this ridge keeps every mixture positive definite
  const double pos_norm = detail::power_norm_sym(w.phi_pos);
  w.lambda_ridge = 1e-3 * w.phi_pos.trace() / double(p) + pos_norm / double(spec.population - 1);
  w.h = mix(w.phi_pos, w.phi_neg, spec.alpha_star, 0.0);
  w.u = random_normal_vector(rng, p, 1.0 / std::sqrt(double(p)));
  DenseMatrix m = w.h;
  for (std::size_t i = 0; i < p; ++i) m(i, i) += w.lambda_ridge;
  try {
    w.reference_dir = solve_spd(m, w.u);
  } catch (const NumericalBreakdown&) {
    throw DegenerateWorld("reference curvature is not positive definite");
  }
  w.queries = DenseMatrix(spec.queries, p);
  draw(w.queries);
  return w;
}

inline Vector mixed_direction(const CurvatureWorld& w, double alpha) {
  return solve_spd(mix(w.phi_pos, w.phi_neg, alpha, w.lambda_ridge), w.u);
}

/// ||H - H^(alpha)||_F
inline double mixing_gap(const CurvatureWorld& w, double alpha) {
  const DenseMatrix ha = mix(w.phi_pos, w.phi_neg, alpha, 0.0);
  double s = 0.0;
  for (std::size_t i = 0; i < ha.flat().size(); ++i) {
    const double d = w.h.flat()[i] - ha.flat()[i];
    s += d * d;
  }
  return std::sqrt(s);
}

/// E_z[(A_alpha - A*)^2] over the query set, unsketched.
inline double curvature_bias(const CurvatureWorld& w, double alpha) {
  const Vector dir = mixed_direction(w, alpha);
  double s = 0.0;
  for (std::size_t q = 0; q < w.queries.rows(); ++q) {
    const double d = dot(w.queries.row(q), dir) - dot(w.queries.row(q), w.reference_dir);
    s += d * d;
  }
  return s / double(w.queries.rows());
}

struct BiasPoint {
  double alpha = 0.0;
  double gap = 0.0;
  double bias = 0.0;
};

struct BiasReport {
  std::vector<BiasPoint> points;
  double bias_at_alpha_star = 0.0;
  bool monotone = false;  // bias non-increasing as the gap shrinks, on each side of alpha_star
};

inline BiasReport verify_bias(const CurvatureWorld& w, std::span<const double> alphas) {
  BiasReport rep;
  for (double a : alphas) rep.points.push_back({a, mixing_gap(w, a), curvature_bias(w, a)});
  rep.bias_at_alpha_star = curvature_bias(w, w.alpha_star);
  rep.monotone = true;
  for (int side : {-1, 1}) {
    std::vector<BiasPoint> pts;
    for (const auto& pt : rep.points)
      if ((side < 0 && pt.alpha <= w.alpha_star) || (side > 0 && pt.alpha >= w.alpha_star)) pts.push_back(pt);
    std::sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.gap < b.gap; });
    for (std::size_t i = 1; i < pts.size(); ++i)
      if (pts[i].bias < pts[i - 1].bias * (1.0 - 1e-12)) rep.monotone = false;
  }
  return rep;
}

struct VariancePoint {
  std::uint32_t k = 0;
  double variance = 0.0;  // mean over queries of the sketch-seed variance of A_hat
  double mse = 0.0;       // E[(A_hat - A*)^2]
  double mse_se = 0.0;
};

struct VarianceReport {
  std::vector<VariancePoint> points;
  double slope = 0.0;  // d log variance / d log k
  bool mse_monotone = false;
};

/// Sketched score A_hat = <Pi g, Pi M^{-1} u> over sketch seeds, for each k.
inline VarianceReport verify_projection_variance(const CurvatureWorld& w, double alpha, SketchKind kind,
                                                 std::span<const std::uint32_t> ks, std::size_t seeds,
                                                 std::uint64_t seed) {
  if (seeds < 2) throw ConfigError("variance sweep needs at least 2 sketch seeds");
  const std::size_t p = w.u.size(), nq = w.queries.rows();
  const Vector dir = mixed_direction(w, alpha);
  std::vector<double> a_star(nq);
  for (std::size_t q = 0; q < nq; ++q) a_star[q] = dot(w.queries.row(q), w.reference_dir);
  VarianceReport rep;
  std::vector<double> logk, logv;
  for (auto k : ks) {
    std::vector<std::vector<double>> est(nq, std::vector<double>(seeds));
    std::vector<double> seed_mse(seeds, 0.0);
    for (std::size_t s = 0; s < seeds; ++s) {
      SketchSpec spec{kind, k, p, derive_seed(seed, "variance-sweep") + s * 0x9e37 + k, 4};
      const Sketch sk(spec);
      const auto pd = sk.apply(dir);
      for (std::size_t q = 0; q < nq; ++q) {
        const double a = inner(sk.apply(w.queries.row(q)), pd);
        est[q][s] = a;
        seed_mse[s] += (a - a_star[q]) * (a - a_star[q]) / double(nq);
      }
    }
    VariancePoint pt;
    pt.k = k;
    for (std::size_t q = 0; q < nq; ++q) pt.variance += variance(est[q]) / double(nq);
    pt.mse = mean(seed_mse);
    pt.mse_se = std::sqrt(variance(seed_mse) / double(seeds));
    rep.points.push_back(pt);
    logk.push_back(std::log(double(k)));
    logv.push_back(std::log(std::max(pt.variance, 1e-300)));
  }
  rep.slope = logk.size() >= 2 ? fit_slope(logk, logv) : 0.0;
  rep.mse_monotone = true;
  for (std::size_t i = 1; i < rep.points.size(); ++i) {
    const auto& a = rep.points[i - 1];
    const auto& b = rep.points[i];
    if (b.k > a.k && b.mse > a.mse + 3.0 * std::hypot(a.mse_se, b.mse_se)) rep.mse_monotone = false;
  }
  return rep;
}

// ===========================================================================
// Toy dual encoders
// ===========================================================================

struct ToySpec {
  std::size_t d_v = 8;
  std::size_t d_t = 8;
  std::size_t d = 8;
  std::size_t pool = 64;
  std::size_t eval = 32;
  std::size_t batch = 16;
  double target_rate = 0.25;
};

struct Toy {
  EndpointParams params;
  FeatureBatch pool;
  FeatureBatch eval;
};

inline ClusterWorldSpec toy_world_spec(const ToySpec& spec) {
  ClusterWorldSpec cw;
  cw.d_v = spec.d_v;
  cw.d_t = spec.d_t;
  cw.d = spec.d;
  cw.latent = 4;
  cw.clusters = 4;
  cw.tau_log = std::log(5.0);
  return cw;
}

inline Toy make_toy(const ToySpec& spec, std::uint64_t seed) {
  const ClusterWorld world(toy_world_spec(spec), seed);
  Rng rng(derive_seed(seed, "toy-data"));
  Toy toy;
  toy.params = world.init_params();
  const auto pool_labels = world.mixed_labels(spec.pool, spec.target_rate, rng);
  const std::vector<std::size_t> eval_labels(spec.eval, 0);
  toy.pool = world.batch(pool_labels, rng, 0);
  toy.eval = world.batch(eval_labels, rng, 1'000'000);
  return toy;
}

/// Gradient of the batch mean loss.
inline Vector mean_loss_gradient(const EndpointParams& p, const FeatureBatch& b) {
  Vector g = loss_sum_gradient(p, b, forward(p, b));
  scale(g.span(), 1.0 / double(b.size()));
  return g;
}

inline EndpointParams stepped(const EndpointParams& p, std::span<const double> delta) {
  EndpointParams q = p;
  Vector flat = p.flatten();
  axpy(1.0, delta, flat);
  q.assign_flat(flat);
  return q;
}

struct DescentTrial {
  double dl_aligned = 0.0;
  double dl_random = 0.0;
  double eta = 0.0;
};

namespace detail {

/// One SGD step on the selected rows (the selection is its own InfoNCE context) and the
/// resulting change in eval loss.
inline double delta_eval(const Toy& toy, std::span<const std::size_t> rows, double eta, double l0,
                         double* linear) {
  const FeatureBatch b = toy.pool.select(rows);
  Vector g = mean_loss_gradient(toy.params, b);
  const Vector u = mean_loss_gradient(toy.params, toy.eval);
  if (linear) *linear = -eta * dot(g, u);
  scale(g.span(), -eta);
  return mean_loss(stepped(toy.params, g), toy.eval) - l0;
}

}  // namespace detail

/// One trial: top-B by alignment g_i^T u versus a seeded random B-subset.
/// eta is halved until both measured changes agree with their linear prediction to 50%.
inline DescentTrial descent_trial(const Toy& toy, std::size_t batch, std::uint64_t seed, bool zero_u = false,
                                  double eta0 = 0.5) {
  const std::size_t n = toy.pool.size();
  if (batch < 2 || batch > n) throw ConfigError("selection batch must be in [2, pool]");
  const Vector u = zero_u ? Vector(toy.params.param_count()) : mean_loss_gradient(toy.params, toy.eval);
  const auto geom = forward(toy.params, toy.pool);
  std::vector<double> score(n);
  for (std::size_t i = 0; i < n; ++i) score[i] = dot(per_sample_gradient(toy.params, toy.pool, geom, i), u);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return score[a] > score[b]; });
  const std::vector<std::size_t> aligned(order.begin(), order.begin() + batch);
  std::vector<std::size_t> rnd(n);
  std::iota(rnd.begin(), rnd.end(), 0);
  Rng rng(derive_seed(seed, "descent-random"));
  rng.shuffle(rnd);
  rnd.resize(batch);

  const double l0 = mean_loss(toy.params, toy.eval);
  double eta = eta0;
  for (int attempt = 0; attempt < 40; ++attempt, eta *= 0.5) {
    double lin_a = 0.0, lin_r = 0.0;
    const double da = detail::delta_eval(toy, aligned, eta, l0, &lin_a);
    const double dr = detail::delta_eval(toy, rnd, eta, l0, &lin_r);
    if (!std::isfinite(da) || !std::isfinite(dr)) continue;
    const bool ok_a = std::abs(da - lin_a) <= 0.5 * std::abs(lin_a);
    const bool ok_r = std::abs(dr - lin_r) <= 0.5 * std::abs(lin_r);
    if (ok_a && ok_r) return {da, dr, eta};
  }
  throw ConfigError("toy step did not stabilize; the toy diverges");
}

struct DescentReport {
  std::size_t trials = 0;
  std::size_t wins = 0;
  double fraction = 0.0;
  double mean_diff = 0.0;  // mean of dl_aligned - dl_random
  double se_diff = 0.0;
};

inline DescentReport verify_descent(const ToySpec& spec, std::size_t trials, std::uint64_t seed, bool zero_u = false) {
  DescentReport rep;
  std::vector<double> diffs;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::uint64_t s = hash_combine(seed, t);
    const Toy toy = make_toy(spec, s);
    const auto tr = descent_trial(toy, spec.batch, s, zero_u);
    diffs.push_back(tr.dl_aligned - tr.dl_random);
    if (tr.dl_aligned < tr.dl_random) ++rep.wins;
  }
  rep.trials = trials;
  rep.fraction = trials ? double(rep.wins) / double(trials) : 0.0;
  rep.mean_diff = mean(diffs);
  rep.se_diff = std::sqrt(variance(diffs) / double(std::max<std::size_t>(trials, 1)));
  return rep;
}

// ===========================================================================
// Mini-batch second moment
// ===========================================================================

/// Per-sample end-point gradients of a toy pool, one row per sample.
inline DenseMatrix toy_gradient_population(const ToySpec& spec, std::uint64_t seed) {
  const Toy toy = make_toy(spec, seed);
  return batch_gradients(toy.params, toy.pool, forward(toy.params, toy.pool));
}

struct BatchMomentReport {
  std::size_t batch = 0;
  std::size_t draws = 0;
  double monte_carlo = 0.0;
  double closed_form = 0.0;  // ||g_q||^2 + tr(Sigma_q) / B
  double rel_err = 0.0;
  double se = 0.0;
};

/// Draws B rows with replacement from the population; q is uniform over rows.
inline BatchMomentReport verify_batch_moments(const DenseMatrix& population, std::size_t batch, std::size_t draws,
                                              std::uint64_t seed) {
  if (batch < 1 || draws < 2 || population.rows() == 0) throw ConfigError("invalid batch-moment setup");
  const std::size_t n = population.rows(), p = population.cols();
  Vector gq(p);
  for (std::size_t r = 0; r < n; ++r) axpy(1.0 / double(n), population.row(r), gq);
  double tr = 0.0;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < p; ++c) {
      const double d = population(r, c) - gq[c];
      tr += d * d / double(n);
    }
  BatchMomentReport rep;
  rep.batch = batch;
  rep.draws = draws;
  rep.closed_form = dot(gq, gq) + tr / double(batch);
  Rng rng(derive_seed(seed, "batch-moments"));
  std::vector<double> sq(draws);
  Vector gh(p);
  for (std::size_t s = 0; s < draws; ++s) {
    gh.fill(0.0);
    for (std::size_t b = 0; b < batch; ++b) axpy(1.0 / double(batch), population.row(rng.below(n)), gh);
    sq[s] = dot(gh, gh);
  }
  rep.monte_carlo = mean(sq);
  rep.se = std::sqrt(variance(sq) / double(draws));
  rep.rel_err = std::abs(rep.monte_carlo - rep.closed_form) / rep.closed_form;
  return rep;
}

// ===========================================================================
// Proxy fidelity: end-point alignment versus full-parameter alignment
// ===========================================================================

struct ProxyReport {
  double spearman = 0.0;
  double pearson = 0.0;
  std::size_t samples = 0;
};

/// Toy with linear backbones h = V a, t = U b. Full parameters are [V, U, W_v, W_t, tau_log].
/// X_i = g_sub,i^T u_sub and Y_i = g_full,i^T u_full, each in its own batch context.
inline ProxyReport proxy_fidelity(std::uint64_t seed, std::size_t pool = 128, std::size_t eval = 32) {
  ClusterWorldSpec cw;
  cw.d_v = 12;  // raw image input width
  cw.d_t = 10;  // raw text input width
  cw.d = 6;
  cw.latent = 4;
  cw.clusters = 4;
  const ClusterWorld world(cw, seed);
  Rng rng(derive_seed(seed, "proxy-fidelity"));
  const std::size_t dv = 8, dt = 8, d = cw.d;
  const DenseMatrix v = random_normal_matrix(rng, dv, cw.d_v, 1.0 / std::sqrt(double(cw.d_v)));
  const DenseMatrix u = random_normal_matrix(rng, dt, cw.d_t, 1.0 / std::sqrt(double(cw.d_t)));
  EndpointParams params(dv, dt, d, std::log(5.0));
  params.w_v = random_normal_matrix(rng, dv, d, 1.0 / std::sqrt(double(dv)));
  params.w_t = random_normal_matrix(rng, dt, d, 1.0 / std::sqrt(double(dt)));

  const auto raw_pool = world.batch(world.mixed_labels(pool, 0.25, rng), rng, 0);
  const auto raw_eval = world.batch(std::vector<std::size_t>(eval, 0), rng, 1'000'000);
  auto lift = [&](const FeatureBatch& raw) {
    FeatureBatch b;
    b.ids = raw.ids;
    b.h = matmul(raw.h, v.transposed());
    b.t = matmul(raw.t, u.transposed());
    return b;
  };
  const FeatureBatch fp = lift(raw_pool), fe = lift(raw_eval);
  const std::size_t p_sub = params.param_count();
  const std::size_t p_full = v.flat().size() + u.flat().size() + p_sub;

  auto full_grads = [&](const FeatureBatch& feats, const FeatureBatch& raw) {
    const auto geom = forward(params, feats);
    DenseMatrix out(feats.size(), p_full);
    BackboneGradients bb;
    for (std::size_t i = 0; i < feats.size(); ++i) {
      const Vector g = per_sample_gradient(params, feats, geom, i, &bb);
      auto row = out.row(i);
      // dl/dV = sum_a dh_a a_a^T, dl/dU likewise
      for (std::size_t a = 0; a < feats.size(); ++a) {
        for (std::size_t r = 0; r < dv; ++r) {
          const double w = bb.dh(a, r);
          if (w == 0.0) continue;
          for (std::size_t c = 0; c < cw.d_v; ++c) row[r * cw.d_v + c] += w * raw.h(a, c);
        }
        for (std::size_t r = 0; r < dt; ++r) {
          const double w = bb.dt(a, r);
          if (w == 0.0) continue;
          for (std::size_t c = 0; c < cw.d_t; ++c) row[v.flat().size() + r * cw.d_t + c] += w * raw.t(a, c);
        }
      }
      std::copy(g.begin(), g.end(), row.begin() + static_cast<std::ptrdiff_t>(p_full - p_sub));
    }
    return out;
  };
  const DenseMatrix gp = full_grads(fp, raw_pool);
  const DenseMatrix ge = full_grads(fe, raw_eval);
  Vector u_full(p_full);
  for (std::size_t i = 0; i < ge.rows(); ++i) axpy(1.0 / double(ge.rows()), ge.row(i), u_full);
  const std::span<const double> u_sub(u_full.data() + (p_full - p_sub), p_sub);

  std::vector<double> xs(pool), ys(pool);
  for (std::size_t i = 0; i < pool; ++i) {
    const auto row = gp.row(i);
    xs[i] = dot(row.subspan(p_full - p_sub), u_sub);
    ys[i] = dot(row, u_full);
  }
  return {spearman(xs, ys), pearson(xs, ys), pool};
}

// ===========================================================================
// AdamW-aware alignment
// ===========================================================================

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Unit-learning-rate AdamW step -(P_t m_hat_t + w_d D theta) after consuming the gradient stream.
/// `mask` is the diagonal of D.
inline Vector adamw_direction(std::span<const Vector> grads, std::span<const double> theta,
                              std::span<const double> mask, const AdamHyper& hp) {
  if (grads.empty()) throw ConfigError("AdamW needs at least one gradient");
  const std::size_t p = theta.size();
  require_same_size(mask.size(), p, "AdamW mask");
  Vector m(p), v(p);
  for (const auto& g : grads) {
    require_same_size(g.size(), p, "AdamW gradient");
    for (std::size_t i = 0; i < p; ++i) {
      m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
      v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
    }
  }
  const double t = double(grads.size());
  const double c1 = 1.0 - std::pow(hp.beta1, t), c2 = 1.0 - std::pow(hp.beta2, t);
  Vector dir(p);
  for (std::size_t i = 0; i < p; ++i) {
    const double mh = m[i] / c1, vh = v[i] / c2;
    dir[i] = -(mh / (std::sqrt(vh) + hp.eps) + hp.weight_decay * mask[i] * theta[i]);
  }
  return dir;
}

struct AdamPoint {
  double eta = 0.0;
  double predicted = 0.0;  // eta * dir^T u
  double measured = 0.0;
  double error = 0.0;
};

struct AdamReport {
  std::vector<AdamPoint> points;
  std::vector<double> ratios;  // error(eta_i) / error(eta_{i+1})
};

/// Moments built from `steps` minibatch gradients at fixed theta, then one update per eta.
inline AdamReport verify_adamw(const ToySpec& spec, std::uint64_t seed, std::span<const double> etas,
                               const AdamHyper& hp = {}, std::size_t steps = 10) {
  const Toy toy = make_toy(spec, seed);
  const std::size_t n = toy.pool.size(), p = toy.params.param_count();
  Rng rng(derive_seed(seed, "adamw-stream"));
  std::vector<Vector> grads;
  for (std::size_t s = 0; s < steps; ++s) {
    std::vector<std::size_t> rows(n);
    std::iota(rows.begin(), rows.end(), 0);
    rng.shuffle(rows);
    rows.resize(spec.batch);
    grads.push_back(mean_loss_gradient(toy.params, toy.pool.select(rows)));
  }
  Vector mask(p, 1.0);
  mask[p - 1] = 0.0;  // no decay on the temperature
  const Vector theta = toy.params.flatten();
  const Vector dir = adamw_direction(grads, theta, mask, hp);
  const Vector u = mean_loss_gradient(toy.params, toy.eval);
  const double l0 = mean_loss(toy.params, toy.eval);
  AdamReport rep;
  for (double eta : etas) {
    Vector delta = dir;
    scale(delta.span(), eta);
    AdamPoint pt;
    pt.eta = eta;
    pt.predicted = eta * dot(dir, u);
    pt.measured = mean_loss(stepped(toy.params, delta), toy.eval) - l0;
    pt.error = std::abs(pt.measured - pt.predicted);
    rep.points.push_back(pt);
  }
  for (std::size_t i = 1; i < rep.points.size(); ++i)
    rep.ratios.push_back(rep.points[i - 1].error / rep.points[i].error);
  return rep;
}

}  // namespace chips::theory
