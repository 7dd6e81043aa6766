#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "chips/errors.hpp"
#include "chips/numerics.hpp"

namespace chips {

enum class SketchKind : std::uint32_t { CountSketch = 0, SparseSigned = 1, Srht = 2 };

inline std::string_view to_string(SketchKind k) {
  switch (k) {
    case SketchKind::CountSketch: return "countsketch";
    case SketchKind::SparseSigned: return "sparse-signed";
    case SketchKind::Srht: return "srht";
  }
  return "unknown";
}

inline SketchKind parse_sketch_kind(std::string_view s) {
  if (s == "countsketch") return SketchKind::CountSketch;
  if (s == "sparse-signed" || s == "sparse") return SketchKind::SparseSigned;
  if (s == "srht") return SketchKind::Srht;
  throw ConfigError("unknown sketch kind '" + std::string(s) + "'");
}

inline std::uint64_t next_pow2(std::uint64_t n) {
  return n <= 1 ? 1 : std::bit_ceil(n);
}

/// Parameters of a Johnson-Lindenstrauss map from input_dim to k dimensions.
struct SketchSpec {
  SketchKind kind = SketchKind::CountSketch;
  std::uint32_t k = 4096;
  std::uint64_t input_dim = 0;
  std::uint64_t seed = 0;
  std::uint32_t sparsity = 4;  // nonzeros per column, sparse-signed only

  void validate() const {
    if (k == 0) throw ConfigError("sketch.k must be > 0");
    if (input_dim == 0) throw ConfigError("sketch input_dim must be > 0");
    if (k > input_dim)
      throw ConfigError("sketch.k = " + std::to_string(k) + " exceeds input dimension " +
                        std::to_string(input_dim));
    if (kind == SketchKind::SparseSigned && (sparsity < 1 || sparsity > k))
      throw ConfigError("sketch.sparsity must be in [1, k]");
  }

  std::uint64_t padded_dim() const { return next_pow2(input_dim); }

  std::uint64_t fingerprint() const {
    std::uint64_t h = fnv1a64("sketch-spec/v1");
    h = hash_combine(h, static_cast<std::uint64_t>(kind));
    h = hash_combine(h, k);
    h = hash_combine(h, input_dim);
    h = hash_combine(h, seed);
    if (kind == SketchKind::SparseSigned) h = hash_combine(h, sparsity);
    return h;
  }

  friend bool operator==(const SketchSpec&, const SketchSpec&) = default;
};

/// Fingerprint for unsketched (exact) subspace vectors of dimension P.
inline std::uint64_t exact_space_fingerprint(std::uint64_t dim) {
  return hash_combine(fnv1a64("exact-space/v1"), dim);
}

/// A vector tagged with the space it lives in. Inner products are only defined
/// between vectors carrying the same fingerprint.
struct SketchedVector {
  Vector data;
  std::uint64_t fingerprint = 0;

  std::size_t size() const noexcept { return data.size(); }
};

inline double inner(const SketchedVector& a, const SketchedVector& b) {
  if (a.fingerprint != b.fingerprint)
    throw SketchMismatch("combining vectors from different sketch spaces");
  return dot(a.data, b.data);
}

/// In-place unnormalized fast Walsh-Hadamard transform; size must be a power of two.
inline void fwht(std::span<double> x) {
  const std::size_t n = x.size();
  for (std::size_t h = 1; h < n; h <<= 1) {
    for (std::size_t i = 0; i < n; i += h << 1) {
      for (std::size_t j = i; j < i + h; ++j) {
        const double a = x[j], b = x[j + h];
        x[j] = a + b;
        x[j + h] = a - b;
      }
    }
  }
}

/// Materialized sketch operator. Immutable after construction and safe to share
/// across threads; Pi is never stored densely.
class Sketch {
 public:
  explicit Sketch(const SketchSpec& spec) : spec_(spec), fingerprint_(spec.fingerprint()) {
    spec_.validate();
    const std::size_t p = spec_.input_dim;
    const std::uint64_t key = hash_combine(spec_.seed, fnv1a64(to_string(spec_.kind)));
    switch (spec_.kind) {
      case SketchKind::CountSketch: {
        rows_.resize(p);
        vals_.resize(p);
        for (std::size_t j = 0; j < p; ++j) {
          const std::uint64_t h = hash_combine(key, j);
          rows_[j] = static_cast<std::uint32_t>(
              (static_cast<uint128>(h) * spec_.k) >> 64);
          vals_[j] = (h & 1ULL) ? 1.0 : -1.0;
        }
        per_col_ = 1;
        break;
      }
      case SketchKind::SparseSigned: {
        const std::size_t s = spec_.sparsity;
        per_col_ = s;
        rows_.resize(p * s);
        vals_.resize(p * s);
        const double v = 1.0 / std::sqrt(static_cast<double>(s));
        std::vector<std::uint32_t> pool;
        for (std::size_t j = 0; j < p; ++j) {
          Rng rng(key, j);
          std::uint32_t* out = rows_.data() + j * s;
          if (2 * s <= spec_.k) {
            std::size_t filled = 0;
            while (filled < s) {
              const auto r = static_cast<std::uint32_t>(rng.below(spec_.k));
              bool dup = false;
              for (std::size_t t = 0; t < filled; ++t) dup = dup || out[t] == r;
              if (!dup) out[filled++] = r;
            }
          } else {
            pool.resize(spec_.k);
            for (std::uint32_t t = 0; t < spec_.k; ++t) pool[t] = t;
            for (std::size_t t = 0; t < s; ++t) {
              const std::size_t pick = t + rng.below(spec_.k - t);
              std::swap(pool[t], pool[pick]);
              out[t] = pool[t];
            }
          }
          for (std::size_t t = 0; t < s; ++t) vals_[j * s + t] = rng.sign() * v;
        }
        break;
      }
      case SketchKind::Srht: {
        const std::uint64_t m = spec_.padded_dim();
        Rng rng(key, 0);
        vals_.resize(p);
        for (auto& s : vals_) s = rng.sign();
        std::vector<std::uint32_t> perm(m);
        for (std::uint32_t t = 0; t < m; ++t) perm[t] = t;
        Rng prng(key, 1);
        for (std::size_t t = 0; t < spec_.k; ++t) {
          const std::size_t pick = t + prng.below(m - t);
          std::swap(perm[t], perm[pick]);
        }
        rows_.assign(perm.begin(), perm.begin() + spec_.k);
        break;
      }
    }
  }

  const SketchSpec& spec() const noexcept { return spec_; }
  std::uint64_t fingerprint() const noexcept { return fingerprint_; }
  std::size_t input_dim() const noexcept { return spec_.input_dim; }
  std::size_t output_dim() const noexcept { return spec_.k; }

  /// out = Pi * in
  void apply(std::span<const double> in, std::span<double> out) const {
    require_same_size(in.size(), spec_.input_dim, "sketch apply input");
    require_same_size(out.size(), spec_.k, "sketch apply output");
    std::fill(out.begin(), out.end(), 0.0);
    switch (spec_.kind) {
      case SketchKind::CountSketch:
      case SketchKind::SparseSigned:
        for (std::size_t j = 0; j < in.size(); ++j) {
          const double x = in[j];
          if (x == 0.0) continue;
          for (std::size_t t = 0; t < per_col_; ++t)
            out[rows_[j * per_col_ + t]] += vals_[j * per_col_ + t] * x;
        }
        break;
      case SketchKind::Srht: {
        std::vector<double> y(spec_.padded_dim(), 0.0);
        for (std::size_t j = 0; j < in.size(); ++j) y[j] = vals_[j] * in[j];
        fwht(y);
        const double s = 1.0 / std::sqrt(static_cast<double>(spec_.k));
        for (std::size_t i = 0; i < spec_.k; ++i) out[i] = s * y[rows_[i]];
        break;
      }
    }
  }

  SketchedVector apply(std::span<const double> in) const {
    SketchedVector sv{Vector(spec_.k), fingerprint_};
    apply(in, sv.data.span());
    return sv;
  }

  /// out = Pi^T * in
  void apply_transpose(std::span<const double> in, std::span<double> out) const {
    require_same_size(in.size(), spec_.k, "sketch transpose input");
    require_same_size(out.size(), spec_.input_dim, "sketch transpose output");
    switch (spec_.kind) {
      case SketchKind::CountSketch:
      case SketchKind::SparseSigned:
        for (std::size_t j = 0; j < out.size(); ++j) {
          double s = 0.0;
          for (std::size_t t = 0; t < per_col_; ++t)
            s += vals_[j * per_col_ + t] * in[rows_[j * per_col_ + t]];
          out[j] = s;
        }
        break;
      case SketchKind::Srht: {
        std::vector<double> y(spec_.padded_dim(), 0.0);
        const double s = 1.0 / std::sqrt(static_cast<double>(spec_.k));
        for (std::size_t i = 0; i < spec_.k; ++i) y[rows_[i]] = s * in[i];
        fwht(y);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] = vals_[j] * y[j];
        break;
      }
    }
  }

  /// Dense k x P matrix of Pi. Test and small-P paths only.
  DenseMatrix to_dense() const {
    DenseMatrix d(spec_.k, spec_.input_dim);
    Vector e(spec_.input_dim), col(spec_.k);
    for (std::size_t j = 0; j < spec_.input_dim; ++j) {
      e[j] = 1.0;
      apply(e, col);
      for (std::size_t i = 0; i < spec_.k; ++i) d(i, j) = col[i];
      e[j] = 0.0;
    }
    return d;
  }

 private:
  SketchSpec spec_;
  std::uint64_t fingerprint_;
  std::size_t per_col_ = 1;
  std::vector<std::uint32_t> rows_;
  std::vector<double> vals_;
};

inline SketchedVector apply(const SketchSpec& spec, std::span<const double> v) {
  return Sketch(spec).apply(v);
}

/// Pi M Pi^T as a k x k matrix, built column by column through Pi^T e_j.
/// The result is symmetrized so it is exactly symmetric.
inline DenseMatrix sketch_matrix(const Sketch& sketch, const MatrixApply& m_apply) {
  const std::size_t k = sketch.output_dim(), p = sketch.input_dim();
  DenseMatrix out(k, k);
  Vector e(k), x(p), y(p), col(k);
  for (std::size_t j = 0; j < k; ++j) {
    e[j] = 1.0;
    sketch.apply_transpose(e, x);
    m_apply(x, y);
    if (!all_finite(y)) throw NumericalBreakdown("sketch_matrix: non-finite matrix product");
    sketch.apply(y, col);
    for (std::size_t i = 0; i < k; ++i) out(i, j) = col[i];
    e[j] = 0.0;
  }
  return symmetrized(out);
}

inline DenseMatrix sketch_matrix(const SketchSpec& spec, const MatrixApply& m_apply) {
  return sketch_matrix(Sketch(spec), m_apply);
}

/// Pi Pi^T.
inline DenseMatrix sketch_gram(const Sketch& sketch) {
  return sketch_matrix(sketch, [](std::span<const double> in, std::span<double> out) {
    std::copy(in.begin(), in.end(), out.begin());
  });
}

/// Working space for subspace gradients: either exact P-space or a sketch's k-space.
/// Every method routes gradients through the same space so their vectors share a fingerprint.
class GradientSpace {
 public:
  static GradientSpace exact(std::size_t p) { return GradientSpace(p); }
  static GradientSpace sketched(const SketchSpec& spec) { return GradientSpace(spec); }

  bool is_sketched() const noexcept { return sketch_.has_value(); }
  const Sketch& sketch() const { return *sketch_; }
  std::size_t input_dim() const noexcept { return input_dim_; }
  std::size_t dim() const noexcept { return sketch_ ? sketch_->output_dim() : input_dim_; }
  std::uint64_t fingerprint() const noexcept { return fingerprint_; }

  SketchedVector project(std::span<const double> g) const {
    if (sketch_) return sketch_->apply(g);
    require_same_size(g.size(), input_dim_, "exact-space gradient");
    return SketchedVector{Vector(g), fingerprint_};
  }

 private:
  explicit GradientSpace(std::size_t p) : input_dim_(p), fingerprint_(exact_space_fingerprint(p)) {}
  explicit GradientSpace(const SketchSpec& spec)
      : sketch_(std::in_place, spec), input_dim_(spec.input_dim), fingerprint_(spec.fingerprint()) {}

  std::optional<Sketch> sketch_;
  std::size_t input_dim_;
  std::uint64_t fingerprint_;
};

}  // namespace chips
