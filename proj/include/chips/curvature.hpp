#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "chips/errors.hpp"
#include "chips/numerics.hpp"
#include "chips/sketch.hpp"

namespace chips {

/// Sufficient statistics of one batch of gradients: sum g g^T, sum g, n.
/// Computed independently per batch so workers can run in parallel; the
/// accumulator consumes them in batch order.
struct BatchMoments {
  DenseMatrix sum_self;
  Vector sum_vec;
  std::size_t count = 0;
  std::uint64_t fingerprint = 0;

  static BatchMoments from_rows(const DenseMatrix& grads, std::uint64_t fingerprint) {
    const std::size_t n = grads.rows(), p = grads.cols();
    BatchMoments m{DenseMatrix(p, p), Vector(p), n, fingerprint};
    for (std::size_t r = 0; r < n; ++r) {
      const auto g = grads.row(r);
      axpy(1.0, g, m.sum_vec);
      for (std::size_t i = 0; i < p; ++i) {
        const double gi = g[i];
        if (gi == 0.0) continue;
        double* row = m.sum_self.data() + i * p;
        for (std::size_t j = i; j < p; ++j) row[j] += gi * g[j];
      }
    }
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = i + 1; j < p; ++j) m.sum_self(j, i) = m.sum_self(i, j);
    return m;
  }

  static BatchMoments from_vectors(std::span<const SketchedVector> grads) {
    if (grads.empty()) throw InsufficientBatch("empty gradient batch");
    const std::uint64_t fp = grads.front().fingerprint;
    DenseMatrix rows(grads.size(), grads.front().size());
    for (std::size_t r = 0; r < grads.size(); ++r) {
      if (grads[r].fingerprint != fp) throw SketchMismatch("gradient batch mixes sketch spaces");
      require_same_size(grads[r].size(), rows.cols(), "gradient batch");
      std::copy(grads[r].data.begin(), grads[r].data.end(), rows.row(r).begin());
    }
    return from_rows(rows, fp);
  }
};

/// Streaming estimator of the self moment Phi_pos and the cross moment Phi_neg.
///
/// With ema_decay == 0 the accumulator keeps global sufficient statistics, so
///   Phi_pos = S / N,  Phi_neg = (s s^T - S) / (N (N - 1))
/// over every pair seen, independent of how the stream was split into batches.
/// With ema_decay > 0 it keeps exponential moving averages of per-batch
/// U-statistics instead.
class MomentAccumulator {
 public:
  MomentAccumulator(std::size_t dim, std::uint64_t fingerprint, double ema_decay = 0.0)
      : dim_(dim), fingerprint_(fingerprint), ema_decay_(ema_decay) {
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("moment ema_decay must be in [0, 1)");
    if (ema_decay_ == 0.0) {
      sum_self_ = DenseMatrix(dim, dim);
      sum_vec_ = Vector(dim);
    } else {
      ema_pos_ = DenseMatrix(dim, dim);
      ema_neg_ = DenseMatrix(dim, dim);
    }
  }

  std::size_t dim() const noexcept { return dim_; }
  std::uint64_t fingerprint() const noexcept { return fingerprint_; }
  std::size_t count() const noexcept { return count_; }
  std::size_t batches() const noexcept { return batches_; }
  double ema_decay() const noexcept { return ema_decay_; }
  const DenseMatrix& sum_self() const noexcept { return sum_self_; }
  const Vector& sum_vec() const noexcept { return sum_vec_; }

  void add(const BatchMoments& m) {
    if (m.fingerprint != fingerprint_) throw SketchMismatch("batch moments from a different sketch space");
    require_same_size(m.sum_vec.size(), dim_, "moment accumulator");
    if (m.count < 2)
      throw InsufficientBatch("cross moment needs at least 2 gradients per batch, got " +
                              std::to_string(m.count));
    if (ema_decay_ == 0.0) {
      axpy(1.0, m.sum_self.flat(), sum_self_.flat());
      axpy(1.0, m.sum_vec, sum_vec_);
    } else {
      const double n = static_cast<double>(m.count);
      const double w = batches_ == 0 ? 1.0 : 1.0 - ema_decay_;
      const double keep = batches_ == 0 ? 0.0 : ema_decay_;
      for (std::size_t i = 0; i < dim_; ++i)
        for (std::size_t j = 0; j < dim_; ++j) {
          const double pos = m.sum_self(i, j) / n;
          const double neg = (m.sum_vec[i] * m.sum_vec[j] - m.sum_self(i, j)) / (n * (n - 1.0));
          ema_pos_(i, j) = keep * ema_pos_(i, j) + w * pos;
          ema_neg_(i, j) = keep * ema_neg_(i, j) + w * neg;
        }
    }
    count_ += m.count;
    ++batches_;
  }

  void accumulate(const DenseMatrix& grads) { add(BatchMoments::from_rows(grads, fingerprint_)); }
  void accumulate(std::span<const SketchedVector> grads) { add(BatchMoments::from_vectors(grads)); }

  /// Associative merge of exact (non-EMA) accumulators built over disjoint shards.
  void merge(const MomentAccumulator& other) {
    if (ema_decay_ != 0.0 || other.ema_decay_ != 0.0)
      throw ConfigError("EMA moment accumulators cannot be merged");
    if (other.fingerprint_ != fingerprint_) throw SketchMismatch("merging accumulators from different spaces");
    require_same_size(other.dim_, dim_, "accumulator merge");
    axpy(1.0, other.sum_self_.flat(), sum_self_.flat());
    axpy(1.0, other.sum_vec_, sum_vec_);
    count_ += other.count_;
    batches_ += other.batches_;
  }

  DenseMatrix phi_pos() const {
    require_count();
    if (ema_decay_ != 0.0) return ema_pos_;
    DenseMatrix out = sum_self_;
    scale(out.flat(), 1.0 / static_cast<double>(count_));
    return out;
  }

  DenseMatrix phi_neg() const {
    require_count();
    if (ema_decay_ != 0.0) return ema_neg_;
    const double n = static_cast<double>(count_);
    DenseMatrix out(dim_, dim_);
    for (std::size_t i = 0; i < dim_; ++i)
      for (std::size_t j = 0; j < dim_; ++j)
        out(i, j) = (sum_vec_[i] * sum_vec_[j] - sum_self_(i, j)) / (n * (n - 1.0));
    return out;
  }

  /// (1 - alpha) Phi_pos + alpha Phi_neg
  DenseMatrix mixed(double alpha) const {
    const DenseMatrix pos = phi_pos(), neg = phi_neg();
    DenseMatrix h(dim_, dim_);
    for (std::size_t i = 0; i < h.flat().size(); ++i)
      h.flat()[i] = (1.0 - alpha) * pos.flat()[i] + alpha * neg.flat()[i];
    return h;
  }

 private:
  void require_count() const {
    if (count_ < 2) throw InsufficientBatch("moments need at least 2 gradients");
  }

  std::size_t dim_;
  std::uint64_t fingerprint_;
  double ema_decay_;
  DenseMatrix sum_self_;
  Vector sum_vec_;
  DenseMatrix ema_pos_;
  DenseMatrix ema_neg_;
  std::size_t count_ = 0;
  std::size_t batches_ = 0;
};

/// M = (1 - alpha) Phi_pos + alpha Phi_neg + lambda R and its solved direction M^{-1} u.
struct CurvatureSurrogate {
  double alpha = 0.6;
  double lambda_ridge = 0.0;
  std::uint64_t fingerprint = 0;
  DenseMatrix m;
  Vector precond_dir;
  CgReport cg_report;
  /// lambda * lambda_min(R) - alpha * ||Phi_neg||_2; a certificate of positive definiteness when > 0.
  double min_eig_lower_bound = 0.0;
  /// Exact smallest eigenvalue, computed for small dimensions only.
  std::optional<double> min_eig;
};

/// Trace-scaled default ridge, 1e-4 * trace(H_alpha) / dim.
inline double default_ridge(const MomentAccumulator& acc, double alpha) {
  if (acc.count() < 2) return 1e-4;
  const double tr = acc.mixed(alpha).trace() / static_cast<double>(acc.dim());
  return tr > 0.0 ? 1e-4 * tr : 1e-4;
}

namespace detail {

/// Largest |eigenvalue| of a symmetric matrix by power iteration.
inline double power_norm_sym(const DenseMatrix& a, int iters = 200) {
  const std::size_t n = a.rows();
  if (n == 0) return 0.0;
  Rng rng(0x5eed);
  Vector v = random_normal_vector(rng, n);
  double lam = 0.0;
  for (int it = 0; it < iters; ++it) {
    const double nv = norm2(v);
    if (nv == 0.0) return 0.0;
    scale(v.span(), 1.0 / nv);
    Vector w = matvec(a, v);
    lam = norm2(w);
    v = std::move(w);
  }
  return lam;
}

inline constexpr std::size_t kExactEigenMaxDim = 128;

}  // namespace detail

/// Builds M. `ridge` replaces the identity in the Tikhonov term when given (for example
/// Pi Pi^T in a sketched space). An empty accumulator yields M = lambda R.
inline CurvatureSurrogate build_surrogate(const MomentAccumulator& acc, double alpha,
                                          double lambda_ridge,
                                          const DenseMatrix* ridge = nullptr) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must be in [0, 1]");
  if (!(lambda_ridge > 0.0)) throw ConfigError("lambda_ridge must be > 0");
  if (acc.count() == 1) throw InsufficientBatch("surrogate needs 0 or at least 2 gradients");
  const std::size_t n = acc.dim();
  if (ridge && (ridge->rows() != n || ridge->cols() != n))
    throw ShapeError("ridge matrix does not match accumulator dimension");

  CurvatureSurrogate s;
  s.alpha = alpha;
  s.lambda_ridge = lambda_ridge;
  s.fingerprint = acc.fingerprint();
  s.m = acc.count() == 0 ? DenseMatrix(n, n) : acc.mixed(alpha);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      s.m(i, j) += lambda_ridge * (ridge ? (*ridge)(i, j) : (i == j ? 1.0 : 0.0));
  s.m = symmetrized(s.m);
  if (!all_finite(s.m.flat())) throw NumericalBreakdown("surrogate contains non-finite entries");

  const double ridge_floor = ridge ? (n <= detail::kExactEigenMaxDim ? rayleigh_min_sym(*ridge) : 0.0) : 1.0;
  const double neg_norm =
      (acc.count() >= 2 && alpha > 0.0) ? detail::power_norm_sym(acc.phi_neg()) : 0.0;
  s.min_eig_lower_bound = lambda_ridge * ridge_floor - alpha * neg_norm;

  if (n <= detail::kExactEigenMaxDim && n > 0) {
    const double lmin = rayleigh_min_sym(s.m);
    s.min_eig = lmin;
    if (lmin <= 0.0)
      throw IndefiniteSurrogate(lambda_ridge + 2.0 * std::abs(lmin),
                                "curvature surrogate is indefinite (lambda_min = " +
                                    std::to_string(lmin) + ")");
  }
  return s;
}

/// Solves M x = u by CG and stores x as the preconditioned direction reused for every sample.
inline const Vector& solve_direction(CurvatureSurrogate& surr, std::span<const double> u,
                                     const CgOptions& opts) {
  require_same_size(u.size(), surr.m.rows(), "solve_direction");
  auto res = cg_solve(surr.m, u, opts);
  surr.precond_dir = std::move(res.x);
  surr.cg_report = std::move(res.report);
  return surr.precond_dir;
}

inline const Vector& solve_direction(CurvatureSurrogate& surr, const SketchedVector& u,
                                     const CgOptions& opts) {
  if (u.fingerprint != surr.fingerprint)
    throw SketchMismatch("evaluation gradient and surrogate live in different spaces");
  return solve_direction(surr, u.data.span(), opts);
}

inline SketchedVector direction_vector(const CurvatureSurrogate& surr) {
  return SketchedVector{surr.precond_dir, surr.fingerprint};
}

}  // namespace chips
