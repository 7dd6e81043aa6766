#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "chips/errors.hpp"

namespace chips {

// GCC/Clang extension; __extension__ keeps -Wpedantic quiet
__extension__ typedef unsigned __int128 uint128;

// ---------------------------------------------------------------------------
// Dense storage
// ---------------------------------------------------------------------------

class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t n, double fill = 0.0) : data_(n, fill) {}
  Vector(std::initializer_list<double> init) : data_(init) {}
  explicit Vector(std::vector<double> v) : data_(std::move(v)) {}
  explicit Vector(std::span<const double> s) : data_(s.begin(), s.end()) {}

  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }
  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  std::span<double> span() noexcept { return data_; }
  std::span<const double> span() const noexcept { return data_; }
  operator std::span<const double>() const noexcept { return data_; }
  operator std::span<double>() noexcept { return data_; }

  const std::vector<double>& values() const noexcept { return data_; }
  void resize(std::size_t n, double fill = 0.0) { data_.assign(n, fill); }
  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Vector&, const Vector&) = default;

 private:
  std::vector<double> data_;
};

/// Row-major dense matrix of doubles.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static DenseMatrix identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static DenseMatrix diagonal(std::span<const double> d) {
    DenseMatrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool square() const noexcept { return rows_ == cols_; }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> flat() noexcept { return data_; }
  std::span<const double> flat() const noexcept { return data_; }

  DenseMatrix transposed() const {
    DenseMatrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  double trace() const {
    double s = 0.0;
    for (std::size_t i = 0; i < std::min(rows_, cols_); ++i) s += (*this)(i, i);
    return s;
  }

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

inline void require_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw ShapeError(std::string(what) + ": " + std::to_string(a) + " vs " + std::to_string(b));
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  require_same_size(a.size(), b.size(), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  require_same_size(x.size(), y.size(), "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline void scale(std::span<double> x, double alpha) {
  for (double& v : x) v *= alpha;
}

inline bool all_finite(std::span<const double> x) {
  return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

inline Vector matvec(const DenseMatrix& a, std::span<const double> x) {
  require_same_size(a.cols(), x.size(), "matvec");
  Vector y(a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto row = a.row(r);
    double s = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) s += row[c] * x[c];
    y[r] = s;
  }
  return y;
}

inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_size(a.cols(), b.rows(), "matmul");
  DenseMatrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto crow = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

/// (B + B^T) / 2
inline DenseMatrix symmetrized(const DenseMatrix& b) {
  if (!b.square()) throw ShapeError("symmetrized: matrix is not square");
  DenseMatrix s(b.rows(), b.cols());
  for (std::size_t i = 0; i < b.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) s(i, j) = 0.5 * (b(i, j) + b(j, i));
  return s;
}

inline double frobenius_norm(const DenseMatrix& a) { return norm2(a.flat()); }

// ---------------------------------------------------------------------------
// Hashing and the counter-based generator
// ---------------------------------------------------------------------------

/// splitmix64 finalizer.
inline constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline constexpr std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) noexcept {
  return mix64(a ^ (mix64(b) + 0x632be59bd9b4e019ULL + (a << 6) + (a >> 2)));
}

inline constexpr std::uint64_t fnv1a64(std::string_view s,
                                       std::uint64_t h = 0xcbf29ce484222325ULL) noexcept {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64_bytes(std::span<const std::uint8_t> bytes,
                                   std::uint64_t h = 0xcbf29ce484222325ULL) noexcept {
  for (std::uint8_t c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Derives a subsystem seed from a parent seed and a label.
inline constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) noexcept {
  return hash_combine(seed, fnv1a64(label));
}

/// Counter-based generator: draw i of stream (seed, stream) is a pure function of
/// (seed, stream, i), so substreams for parallel workers never overlap and the
/// integer sequence is identical on every platform.
class Rng {
 public:
  static constexpr std::string_view algorithm = "splitmix64-ctr";

  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) noexcept
      : seed_(seed), stream_(stream), key_(hash_combine(seed, stream)) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  std::uint64_t counter() const noexcept { return counter_; }

  Rng substream(std::uint64_t index) const noexcept { return Rng(key_, index); }
  Rng derive(std::string_view label) const noexcept { return Rng(derive_seed(key_, label)); }

  std::uint64_t next_u64() noexcept { return mix64(key_ ^ mix64(counter_++)); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n) via the multiply-shift reduction.
  std::uint64_t below(std::uint64_t n) noexcept {
    return static_cast<std::uint64_t>((static_cast<uint128>(next_u64()) * n) >> 64);
  }

  /// Standard normal (Marsaglia polar method).
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  double sign() noexcept { return (next_u64() >> 63) ? 1.0 : -1.0; }

  template <typename T>
  void shuffle(std::vector<T>& v) noexcept {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline Vector random_normal_vector(Rng& rng, std::size_t n, double sigma = 1.0) {
  Vector v(n);
  for (auto& x : v) x = sigma * rng.normal();
  return v;
}

inline DenseMatrix random_normal_matrix(Rng& rng, std::size_t r, std::size_t c,
                                        double sigma = 1.0) {
  DenseMatrix m(r, c);
  for (auto& x : m.flat()) x = sigma * rng.normal();
  return m;
}

/// A^T A + shift*I for a random Gaussian A: symmetric positive definite for shift > 0.
inline DenseMatrix random_spd(Rng& rng, std::size_t n, double shift = 1.0) {
  const DenseMatrix a = random_normal_matrix(rng, n, n, 1.0 / std::sqrt(static_cast<double>(n)));
  DenseMatrix m = matmul(a.transposed(), a);
  for (std::size_t i = 0; i < n; ++i) m(i, i) += shift;
  return symmetrized(m);
}

// ---------------------------------------------------------------------------
// Conjugate gradient
// ---------------------------------------------------------------------------

using MatrixApply = std::function<void(std::span<const double> in, std::span<double> out)>;

inline MatrixApply as_apply(const DenseMatrix& a) {
  return [&a](std::span<const double> in, std::span<double> out) {
    require_same_size(a.cols(), in.size(), "matrix apply");
    for (std::size_t r = 0; r < a.rows(); ++r) {
      const auto row = a.row(r);
      double s = 0.0;
      for (std::size_t c = 0; c < row.size(); ++c) s += row[c] * in[c];
      out[r] = s;
    }
  };
}

struct CgOptions {
  std::size_t max_iters = 5;
  double tol = 1e-10;
  /// Optional Jacobi preconditioner (diagonal of A); empty means unpreconditioned.
  std::vector<double> jacobi_diagonal;
};

struct CgReport {
  std::size_t iterations = 0;
  double residual_norm = 0.0;
  bool converged = false;
  /// ||r_k|| after each iteration, starting with ||b - A x0||.
  std::vector<double> residual_history;
};

struct CgResult {
  Vector x;
  CgReport report;
};

/// Solves A x = b for symmetric positive-definite A given only its action.
/// Stops when ||A x - b|| <= tol or after max_iters iterations.
/// Throws NumericalBreakdown on non-finite values or non-positive curvature p^T A p.
inline CgResult cg_solve(const MatrixApply& apply, std::span<const double> b,
                         const CgOptions& opts) {
  if (opts.max_iters < 1) throw ConfigError("cg_solve: iters must be >= 1");
  if (!(opts.tol > 0.0)) throw ConfigError("cg_solve: tol must be > 0");
  const std::size_t n = b.size();
  const bool precond = !opts.jacobi_diagonal.empty();
  if (precond) require_same_size(opts.jacobi_diagonal.size(), n, "cg_solve jacobi diagonal");
  if (!all_finite(b)) throw NumericalBreakdown("cg_solve: right-hand side is not finite");

  CgResult res{Vector(n), {}};
  Vector r(b);
  Vector z(n), p(n), ap(n);
  auto precondition = [&](const Vector& in, Vector& out) {
    for (std::size_t i = 0; i < n; ++i) out[i] = precond ? in[i] / opts.jacobi_diagonal[i] : in[i];
  };

  double rnorm = norm2(r);
  res.report.residual_history.push_back(rnorm);
  if (rnorm <= opts.tol) {
    res.report.residual_norm = rnorm;
    res.report.converged = true;
    return res;
  }
  precondition(r, z);
  p = z;
  double rz = dot(r, z);
  for (std::size_t it = 0; it < opts.max_iters; ++it) {
    apply(p.span(), ap.span());
    const double pap = dot(p, ap);
    if (!std::isfinite(pap)) throw NumericalBreakdown("cg_solve: non-finite p^T A p");
    if (pap <= 0.0)
      throw NumericalBreakdown("cg_solve: non-positive curvature p^T A p = " +
                               std::to_string(pap) + " (operator not positive definite)");
    const double alpha = rz / pap;
    axpy(alpha, p, res.x);
    axpy(-alpha, ap, r);
    rnorm = norm2(r);
    if (!std::isfinite(rnorm)) throw NumericalBreakdown("cg_solve: non-finite residual");
    res.report.iterations = it + 1;
    res.report.residual_history.push_back(rnorm);
    if (rnorm <= opts.tol) {
      res.report.converged = true;
      break;
    }
    precondition(r, z);
    const double rz_next = dot(r, z);
    const double beta = rz_next / rz;
    rz = rz_next;
    for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
  }
  res.report.residual_norm = rnorm;
  return res;
}

inline CgResult cg_solve(const DenseMatrix& a, std::span<const double> b, const CgOptions& opts) {
  if (!a.square()) throw ShapeError("cg_solve: matrix is not square");
  require_same_size(a.cols(), b.size(), "cg_solve");
  return cg_solve(as_apply(a), b, opts);
}

// ---------------------------------------------------------------------------
// Dense factorizations (theory-lab scale)
// ---------------------------------------------------------------------------

/// Lower Cholesky factor L with A = L L^T. Throws NumericalBreakdown when A is not
/// numerically positive definite.
inline DenseMatrix cholesky(const DenseMatrix& a) {
  if (!a.square()) throw ShapeError("cholesky: matrix is not square");
  const std::size_t n = a.rows();
  DenseMatrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    const auto lj = l.row(j);
    for (std::size_t k = 0; k < j; ++k) d -= lj[k] * lj[k];
    if (!(d > 0.0) || !std::isfinite(d))
      throw NumericalBreakdown("cholesky: matrix is not positive definite (pivot " +
                               std::to_string(j) + ")");
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      const auto li = l.row(i);
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= li[k] * lj[k];
      l(i, j) = s / ljj;
    }
  }
  return l;
}

inline Vector cholesky_solve(const DenseMatrix& l, std::span<const double> b) {
  require_same_size(l.rows(), b.size(), "cholesky_solve");
  const std::size_t n = l.rows();
  Vector y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    const auto li = l.row(i);
    for (std::size_t k = 0; k < i; ++k) s -= li[k] * y[k];
    y[i] = s / li[i];
  }
  Vector x(n);
  for (std::size_t ii = n; ii-- > 0;) {
    double s = y[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x[k];
    x[ii] = s / l(ii, ii);
  }
  return x;
}

struct SymmetricEigen {
  Vector values;        // ascending
  DenseMatrix vectors;  // column j is the eigenvector of values[j]
};

/// Cyclic Jacobi eigensolver for a symmetric matrix (the input is symmetrized first).
inline SymmetricEigen symmetric_eigen(const DenseMatrix& input, double tol = 1e-15,
                                      int max_sweeps = 100) {
  if (!input.square()) throw ShapeError("symmetric_eigen: matrix is not square");
  const std::size_t n = input.rows();
  DenseMatrix a = symmetrized(input);
  DenseMatrix v = DenseMatrix::identity(n);
  const double scale_ref = std::max(frobenius_norm(a), std::numeric_limits<double>::min());
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (std::sqrt(off) <= tol * scale_ref) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) < std::numeric_limits<double>::min()) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto i, auto j) { return a(i, i) < a(j, j); });
  SymmetricEigen out{Vector(n), DenseMatrix(n, n)};
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = a(order[j], order[j]);
    for (std::size_t k = 0; k < n; ++k) out.vectors(k, j) = v(k, order[j]);
  }
  return out;
}

/// Smallest eigenvalue of (B + B^T)/2.
inline double rayleigh_min_sym(const DenseMatrix& b) {
  if (!b.square()) throw ShapeError("rayleigh_min_sym: matrix is not square");
  if (b.rows() == 0) throw ShapeError("rayleigh_min_sym: empty matrix");
  return symmetric_eigen(b).values[0];
}

/// Largest singular value, sqrt(lambda_max(B^T B)).
inline double spectral_norm(const DenseMatrix& b) {
  const DenseMatrix btb = matmul(b.transposed(), b);
  const auto eig = symmetric_eigen(btb);
  return std::sqrt(std::max(0.0, eig.values[eig.values.size() - 1]));
}

/// f(A) for symmetric A via eigendecomposition; eigenvalues are floored at `floor`.
template <typename F>
DenseMatrix symmetric_function(const DenseMatrix& a, F&& f, double floor = 1e-12) {
  const auto eig = symmetric_eigen(a);
  const std::size_t n = a.rows();
  DenseMatrix out(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    const double fl = f(std::max(eig.values[j], floor));
    for (std::size_t r = 0; r < n; ++r) {
      const double vr = eig.vectors(r, j) * fl;
      for (std::size_t c = 0; c < n; ++c) out(r, c) += vr * eig.vectors(c, j);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

inline double mean(std::span<const double> x) {
  if (x.empty()) return 0.0;
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

/// Unbiased sample variance.
inline double variance(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  const double m = mean(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
  require_same_size(x.size(), y.size(), "pearson");
  const double mx = mean(x), my = mean(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

/// Ranks starting at 1 with ties receiving their average rank.
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry);
}

/// Least-squares slope of y on x.
inline double fit_slope(std::span<const double> x, std::span<const double> y) {
  require_same_size(x.size(), y.size(), "fit_slope");
  const double mx = mean(x), my = mean(y);
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxy / sxx;
}

inline double sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace chips
