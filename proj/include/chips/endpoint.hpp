#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "chips/errors.hpp"
#include "chips/numerics.hpp"

namespace chips {

/// Projection heads and log-temperature of a dual encoder.
/// Image embedding is W_v^T h (W_v is d_v x d), text embedding is W_t^T t.
struct EndpointParams {
  DenseMatrix w_v;
  DenseMatrix w_t;
  double tau_log = 0.0;

  EndpointParams() = default;
  EndpointParams(std::size_t d_v, std::size_t d_t, std::size_t d, double tau_log_ = 0.0)
      : w_v(d_v, d), w_t(d_t, d), tau_log(tau_log_) {}

  std::size_t d_v() const noexcept { return w_v.rows(); }
  std::size_t d_t() const noexcept { return w_t.rows(); }
  std::size_t d() const noexcept { return w_v.cols(); }
  double tau() const noexcept { return std::exp(tau_log); }

  /// P = d_v*d + d_t*d + 1
  std::size_t param_count() const noexcept { return w_v.flat().size() + w_t.flat().size() + 1; }

  /// Layout [vec(W_v) | vec(W_t) | tau_log], row-major.
  Vector flatten() const {
    Vector v(param_count());
    std::copy(w_v.flat().begin(), w_v.flat().end(), v.begin());
    std::copy(w_t.flat().begin(), w_t.flat().end(), v.begin() + w_v.flat().size());
    v[v.size() - 1] = tau_log;
    return v;
  }

  void assign_flat(std::span<const double> v) {
    require_same_size(v.size(), param_count(), "EndpointParams::assign_flat");
    const auto nv = w_v.flat().size();
    std::copy(v.begin(), v.begin() + nv, w_v.flat().begin());
    std::copy(v.begin() + nv, v.end() - 1, w_t.flat().begin());
    tau_log = v.back();
  }

  void validate() const {
    if (w_v.cols() != w_t.cols()) throw ShapeError("W_v and W_t disagree on embedding dim d");
    if (d() == 0) throw ShapeError("embedding dim d must be > 0");
    if (!all_finite(w_v.flat()) || !all_finite(w_t.flat()) || !std::isfinite(tau_log))
      throw ShapeError("endpoint parameters contain non-finite values");
  }

  friend bool operator==(const EndpointParams&, const EndpointParams&) = default;
};

/// Backbone features for a batch of image-text pairs.
struct FeatureBatch {
  std::vector<std::uint64_t> ids;
  DenseMatrix h;  // B x d_v
  DenseMatrix t;  // B x d_t

  std::size_t size() const noexcept { return ids.size(); }

  void validate(const EndpointParams& p) const {
    if (ids.empty()) throw ShapeError("feature batch is empty");
    if (h.rows() != ids.size() || t.rows() != ids.size())
      throw ShapeError("feature batch row counts disagree");
    if (h.cols() != p.d_v()) throw ShapeError("image feature dim does not match W_v");
    if (t.cols() != p.d_t()) throw ShapeError("text feature dim does not match W_t");
    for (double v : h.flat())
      if (std::isnan(v)) throw ShapeError("image features contain NaN");
    for (double v : t.flat())
      if (std::isnan(v)) throw ShapeError("text features contain NaN");
  }

  /// Sub-batch of the given rows, in the given order.
  FeatureBatch select(std::span<const std::size_t> rows) const {
    FeatureBatch b;
    b.h = DenseMatrix(rows.size(), h.cols());
    b.t = DenseMatrix(rows.size(), t.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      b.ids.push_back(ids[rows[r]]);
      std::copy(h.row(rows[r]).begin(), h.row(rows[r]).end(), b.h.row(r).begin());
      std::copy(t.row(rows[r]).begin(), t.row(rows[r]).end(), b.t.row(r).begin());
    }
    return b;
  }
};

struct BatchGeometry {
  DenseMatrix xhat;   // B x d
  DenseMatrix yhat;   // B x d
  DenseMatrix s;      // B x B, s_ij = tau * xhat_i . yhat_j
  DenseMatrix p_i2t;  // row softmax of s
  DenseMatrix p_t2i;  // column softmax of s
  Vector norms_v;
  Vector norms_t;
  Vector lse_rows;
  Vector lse_cols;
  double tau = 1.0;

  std::size_t size() const noexcept { return s.rows(); }
};

namespace detail {

inline void project_normalize(const DenseMatrix& feats, const DenseMatrix& w,
                              const std::vector<std::uint64_t>& ids, DenseMatrix& out,
                              Vector& norms) {
  const std::size_t b = feats.rows(), d = w.cols();
  out = DenseMatrix(b, d);
  norms = Vector(b);
  for (std::size_t a = 0; a < b; ++a) {
    auto o = out.row(a);
    const auto f = feats.row(a);
    for (std::size_t r = 0; r < f.size(); ++r) {
      const double fr = f[r];
      if (fr == 0.0) continue;
      const auto wr = w.row(r);
      for (std::size_t c = 0; c < d; ++c) o[c] += fr * wr[c];
    }
    const double n = norm2(o);
    if (!(n > 0.0) || !std::isfinite(n))
      throw DegenerateEmbedding(ids[a], "projected embedding has zero or non-finite norm");
    norms[a] = n;
    for (double& v : o) v /= n;
  }
}

inline double log_sum_exp(std::span<const double> x) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : x) m = std::max(m, v);
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

}  // namespace detail

inline BatchGeometry forward(const EndpointParams& params, const FeatureBatch& batch) {
  batch.validate(params);
  BatchGeometry g;
  g.tau = params.tau();
  detail::project_normalize(batch.h, params.w_v, batch.ids, g.xhat, g.norms_v);
  detail::project_normalize(batch.t, params.w_t, batch.ids, g.yhat, g.norms_t);
  const std::size_t b = batch.size();
  g.s = DenseMatrix(b, b);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) g.s(i, j) = g.tau * dot(g.xhat.row(i), g.yhat.row(j));

  g.p_i2t = DenseMatrix(b, b);
  g.p_t2i = DenseMatrix(b, b);
  g.lse_rows = Vector(b);
  g.lse_cols = Vector(b);
  std::vector<double> col(b);
  for (std::size_t i = 0; i < b; ++i) {
    g.lse_rows[i] = detail::log_sum_exp(g.s.row(i));
    for (std::size_t j = 0; j < b; ++j) g.p_i2t(i, j) = std::exp(g.s(i, j) - g.lse_rows[i]);
  }
  for (std::size_t j = 0; j < b; ++j) {
    for (std::size_t i = 0; i < b; ++i) col[i] = g.s(i, j);
    g.lse_cols[j] = detail::log_sum_exp(col);
    for (std::size_t i = 0; i < b; ++i) g.p_t2i(i, j) = std::exp(g.s(i, j) - g.lse_cols[j]);
  }
  return g;
}

/// Per-sample symmetric InfoNCE losses 0.5 * (CE(S_i,:, i) + CE(S_:,i, i)).
inline Vector symmetric_infonce(const BatchGeometry& g) {
  const std::size_t b = g.size();
  Vector l(b);
  for (std::size_t i = 0; i < b; ++i)
    l[i] = 0.5 * ((g.lse_rows[i] - g.s(i, i)) + (g.lse_cols[i] - g.s(i, i)));
  return l;
}

/// Optional backbone-side gradients of one sample's loss (dl/dh_a, dl/dt_a for every row a).
struct BackboneGradients {
  DenseMatrix dh;  // B x d_v
  DenseMatrix dt;  // B x d_t
};

namespace detail {

/// Backpropagates a logits gradient dS through similarity, normalization and projection.
/// `rows_x`/`rows_y` receive dl/dxhat and dl/dyhat. Writes the subspace gradient into `out`.
inline void backprop_embeddings(const EndpointParams& params, const FeatureBatch& batch,
                                const BatchGeometry& g, const DenseMatrix& dxhat,
                                const DenseMatrix& dyhat, double dtau_log, std::span<double> out,
                                BackboneGradients* backbone) {
  const std::size_t b = g.size(), d = params.d(), dv = params.d_v(), dt = params.d_t();
  std::fill(out.begin(), out.end(), 0.0);
  double* gwv = out.data();
  double* gwt = out.data() + dv * d;
  std::vector<double> dp(d);
  if (backbone) {
    backbone->dh = DenseMatrix(b, dv);
    backbone->dt = DenseMatrix(b, dt);
  }
  auto push = [&](const DenseMatrix& hat, const DenseMatrix& dhat, const Vector& norms,
                  const DenseMatrix& feats, const DenseMatrix& w, double* gw, DenseMatrix* dfeat) {
    for (std::size_t a = 0; a < b; ++a) {
      const auto xa = hat.row(a);
      const auto ga = dhat.row(a);
      const double proj = dot(xa, ga);
      bool any = false;
      for (std::size_t c = 0; c < d; ++c) {
        dp[c] = (ga[c] - xa[c] * proj) / norms[a];
        any = any || dp[c] != 0.0;
      }
      if (!any) continue;
      const auto f = feats.row(a);
      for (std::size_t r = 0; r < f.size(); ++r) {
        const double fr = f[r];
        double* grow = gw + r * d;
        for (std::size_t c = 0; c < d; ++c) grow[c] += fr * dp[c];
      }
      if (dfeat) {
        auto df = dfeat->row(a);
        for (std::size_t r = 0; r < df.size(); ++r) df[r] = dot(w.row(r), dp);
      }
    }
  };
  push(g.xhat, dxhat, g.norms_v, batch.h, params.w_v, gwv, backbone ? &backbone->dh : nullptr);
  push(g.yhat, dyhat, g.norms_t, batch.t, params.w_t, gwt, backbone ? &backbone->dt : nullptr);
  out[out.size() - 1] = dtau_log;
}

}  // namespace detail

/// Gradient of loss l_i with respect to [W_v, W_t, tau_log], the rest of the batch acting
/// as negatives. Uses the sparsity of dl_i/dS (row i and column i only).
inline Vector per_sample_gradient(const EndpointParams& params, const FeatureBatch& batch,
                                  const BatchGeometry& g, std::size_t i,
                                  BackboneGradients* backbone = nullptr) {
  const std::size_t b = g.size(), d = params.d();
  if (i >= b) throw IndexOutOfRange("sample index " + std::to_string(i) + " outside batch");
  Vector out(params.param_count());
  if (b == 1) {
    if (backbone) {
      backbone->dh = DenseMatrix(1, params.d_v());
      backbone->dt = DenseMatrix(1, params.d_t());
    }
    return out;
  }
  // dl_i/ds_ij (row) and dl_i/ds_ai (column)
  std::vector<double> drow(b), dcol(b);
  for (std::size_t j = 0; j < b; ++j) drow[j] = 0.5 * (g.p_i2t(i, j) - (j == i ? 1.0 : 0.0));
  for (std::size_t a = 0; a < b; ++a) dcol[a] = 0.5 * (g.p_t2i(a, i) - (a == i ? 1.0 : 0.0));

  double dtau_log = 0.0;
  for (std::size_t j = 0; j < b; ++j) dtau_log += drow[j] * g.s(i, j);
  for (std::size_t a = 0; a < b; ++a) dtau_log += dcol[a] * g.s(a, i);

  const double tau = g.tau;
  DenseMatrix dx(b, d), dy(b, d);
  // Row i of dS touches xhat_i and every yhat_j.
  for (std::size_t j = 0; j < b; ++j) {
    const double w = tau * drow[j];
    auto dxi = dx.row(i);
    auto dyj = dy.row(j);
    const auto yj = g.yhat.row(j);
    const auto xi = g.xhat.row(i);
    for (std::size_t c = 0; c < d; ++c) {
      dxi[c] += w * yj[c];
      dyj[c] += w * xi[c];
    }
  }
  // Column i of dS touches every xhat_a and yhat_i.
  for (std::size_t a = 0; a < b; ++a) {
    const double w = tau * dcol[a];
    auto dxa = dx.row(a);
    auto dyi = dy.row(i);
    const auto yi = g.yhat.row(i);
    const auto xa = g.xhat.row(a);
    for (std::size_t c = 0; c < d; ++c) {
      dxa[c] += w * yi[c];
      dyi[c] += w * xa[c];
    }
  }
  detail::backprop_embeddings(params, batch, g, dx, dy, dtau_log, out.span(), backbone);
  return out;
}

inline Vector per_sample_gradient(const EndpointParams& params, const FeatureBatch& batch,
                                  std::size_t i) {
  return per_sample_gradient(params, batch, forward(params, batch), i);
}

/// All per-sample gradients of a batch, one row per sample (B x P).
inline DenseMatrix batch_gradients(const EndpointParams& params, const FeatureBatch& batch,
                                   const BatchGeometry& g) {
  DenseMatrix out(batch.size(), params.param_count());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Vector gi = per_sample_gradient(params, batch, g, i);
    std::copy(gi.begin(), gi.end(), out.row(i).begin());
  }
  return out;
}

/// Gradient of sum_i l_i, derived directly from dL/dS = (P_i2t - I + P_t2i - I) / 2.
inline Vector loss_sum_gradient(const EndpointParams& params, const FeatureBatch& batch,
                                const BatchGeometry& g) {
  const std::size_t b = g.size(), d = params.d();
  DenseMatrix ds(b, b);
  for (std::size_t a = 0; a < b; ++a)
    for (std::size_t c = 0; c < b; ++c)
      ds(a, c) = 0.5 * (g.p_i2t(a, c) + g.p_t2i(a, c)) - (a == c ? 1.0 : 0.0);
  double dtau_log = 0.0;
  for (std::size_t a = 0; a < b; ++a)
    for (std::size_t c = 0; c < b; ++c) dtau_log += ds(a, c) * g.s(a, c);
  DenseMatrix dx(b, d), dy(b, d);
  for (std::size_t a = 0; a < b; ++a)
    for (std::size_t c = 0; c < b; ++c) {
      const double w = g.tau * ds(a, c);
      if (w == 0.0) continue;
      axpy(w, g.yhat.row(c), dx.row(a));
      axpy(w, g.xhat.row(a), dy.row(c));
    }
  Vector out(params.param_count());
  detail::backprop_embeddings(params, batch, g, dx, dy, dtau_log, out.span(), nullptr);
  return out;
}

/// Mean loss of a batch.
inline double mean_loss(const EndpointParams& params, const FeatureBatch& batch) {
  const Vector l = symmetric_infonce(forward(params, batch));
  return mean(l);
}

/// Running estimate of the evaluation mean gradient.
/// decay == 0: plain sample-weighted mean over everything seen.
/// decay in (0,1): EMA over batch means, initialised with the first batch mean.
class EvalGradientEstimator {
 public:
  explicit EvalGradientEstimator(double decay = 0.0) : decay_(decay) {
    if (!(decay >= 0.0 && decay < 1.0)) throw ConfigError("eval ema_decay must be in [0, 1)");
  }

  void add_batch_mean(std::span<const double> batch_mean, std::size_t count) {
    if (count == 0) return;
    if (value_.empty()) value_ = Vector(batch_mean.size());
    require_same_size(batch_mean.size(), value_.size(), "eval gradient batch mean");
    if (decay_ == 0.0) {
      const double w = static_cast<double>(count) / static_cast<double>(samples_ + count);
      for (std::size_t i = 0; i < value_.size(); ++i)
        value_[i] += w * (batch_mean[i] - value_[i]);
    } else if (batches_ == 0) {
      std::copy(batch_mean.begin(), batch_mean.end(), value_.begin());
    } else {
      for (std::size_t i = 0; i < value_.size(); ++i)
        value_[i] = decay_ * value_[i] + (1.0 - decay_) * batch_mean[i];
    }
    samples_ += count;
    ++batches_;
  }

  void add_batch(const EndpointParams& params, const FeatureBatch& batch) {
    const auto g = forward(params, batch);
    Vector m(params.param_count());
    for (std::size_t i = 0; i < batch.size(); ++i) axpy(1.0, per_sample_gradient(params, batch, g, i), m);
    scale(m.span(), 1.0 / static_cast<double>(batch.size()));
    add_batch_mean(m, batch.size());
  }

  std::size_t batches() const noexcept { return batches_; }
  const Vector& value() const {
    if (batches_ == 0) throw ConfigError("evaluation gradient requested before any batch");
    return value_;
  }

 private:
  double decay_;
  Vector value_;
  std::size_t samples_ = 0;
  std::size_t batches_ = 0;
};

inline Vector eval_mean_gradient(const EndpointParams& params,
                                 std::span<const FeatureBatch> eval_batches, double ema_decay) {
  if (eval_batches.empty()) throw ConfigError("evaluation stream is empty");
  EvalGradientEstimator est(ema_decay);
  for (const auto& b : eval_batches) est.add_batch(params, b);
  return est.value();
}

}  // namespace chips
