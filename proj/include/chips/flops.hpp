#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <string>
#include <string_view>

#include "chips/errors.hpp"

namespace chips::flops {

// GCC/Clang extension; __extension__ keeps -Wpedantic quiet
__extension__ typedef unsigned __int128 u128;

inline u128 add(u128 a, u128 b) {
  u128 r;
  if (__builtin_add_overflow(a, b, &r)) throw Overflow("FLOP count exceeds 128 bits");
  return r;
}

inline u128 mul(u128 a, u128 b) {
  u128 r;
  if (__builtin_mul_overflow(a, b, &r)) throw Overflow("FLOP count exceeds 128 bits");
  return r;
}

template <typename... T>
u128 sum(u128 a, T... rest) {
  ((a = add(a, static_cast<u128>(rest))), ...);
  return a;
}

template <typename... T>
u128 prod(u128 a, T... rest) {
  ((a = mul(a, static_cast<u128>(rest))), ...);
  return a;
}

inline std::string to_string(u128 v) {
  if (v == 0) return "0";
  std::string s;
  while (v) {
    s.push_back(static_cast<char>('0' + static_cast<int>(v % 10)));
    v /= 10;
  }
  return {s.rbegin(), s.rend()};
}

/// Scientific notation with `sig` significant digits, half-up rounding, e.g. "5.258869e16".
inline std::string format_sig(u128 v, int sig) {
  if (sig < 1) throw ConfigError("significant digits must be >= 1");
  std::string digits = to_string(v);
  if (v == 0) return "0";
  int exp10 = static_cast<int>(digits.size()) - 1;
  if (static_cast<int>(digits.size()) > sig) {
    const bool up = digits[static_cast<std::size_t>(sig)] >= '5';
    digits.resize(static_cast<std::size_t>(sig));
    if (up) {
      int i = sig - 1;
      while (i >= 0 && digits[static_cast<std::size_t>(i)] == '9') digits[static_cast<std::size_t>(i--)] = '0';
      if (i < 0) {
        digits.insert(digits.begin(), '1');
        digits.pop_back();
        ++exp10;
      } else {
        ++digits[static_cast<std::size_t>(i)];
      }
    }
  } else {
    digits.append(static_cast<std::size_t>(sig) - digits.size(), '0');
  }
  std::string out(1, digits[0]);
  if (sig > 1) out += "." + digits.substr(1);
  return out + "e" + std::to_string(exp10);
}

enum class SketchCost { CountSketch, SparseSigned, Srht, DenseGaussian };

inline std::string_view to_string(SketchCost k) {
  switch (k) {
    case SketchCost::CountSketch: return "countsketch";
    case SketchCost::SparseSigned: return "sparse-signed";
    case SketchCost::Srht: return "srht";
    case SketchCost::DenseGaussian: return "dense-gaussian";
  }
  return "unknown";
}

struct CostModel {
  std::uint64_t b_train = 32768;
  std::uint64_t b_eval = 3400;
  std::uint64_t n_train_samples = 24'000'000;
  std::uint64_t n_eval_samples = 3400;
  std::uint64_t d_v = 768;
  std::uint64_t d_t = 512;
  std::uint64_t d = 512;
  std::uint64_t k = 4096;
  std::uint64_t epochs = 10;    // E, TracIn accumulation epochs
  std::uint64_t cg_iters = 5;   // I
  std::uint64_t c_neg = 6;
  std::uint64_t sparsity = 4;   // s, sparse-signed only
  SketchCost sketch = SketchCost::CountSketch;

  void validate() const {
    if (!b_train || !b_eval || !d_v || !d_t || !d || !k || !epochs || !cg_iters || !sparsity)
      throw ConfigError("cost model sizes must be positive");
  }

  /// P = d_v d + d_t d + 1
  u128 subspace_dim() const { return sum(prod(d_v, d), prod(d_t, d), 1); }

  static u128 ceil_div(std::uint64_t a, std::uint64_t b) { return (static_cast<u128>(a) + b - 1) / b; }
  u128 n_train() const { return ceil_div(n_train_samples, b_train); }
  u128 n_eval() const { return ceil_div(n_eval_samples, b_eval); }

  /// Cost of one sketch application.
  u128 c_rp() const {
    const u128 p = subspace_dim();
    switch (sketch) {
      case SketchCost::CountSketch: return prod(2, p);
      case SketchCost::SparseSigned: return prod(2, sparsity, p);
      case SketchCost::Srht: {
        if (p > (u128{1} << 62)) throw Overflow("SRHT padded dimension exceeds 64 bits");
        const auto m = std::bit_ceil(static_cast<std::uint64_t>(p));
        return prod(2, m, static_cast<std::uint64_t>(std::countr_zero(m)));
      }
      case SketchCost::DenseGaussian: return prod(2, k, p);
    }
    return 0;
  }
};

/// Batch-level primitives at batch size b.
struct Primitives {
  u128 lin, norm, mm, fwd, bwd, fb, jvp;
};

inline Primitives primitives(const CostModel& m, std::uint64_t b) {
  Primitives p{};
  p.lin = prod(2, b, sum(m.d_v, m.d_t), m.d);
  p.norm = prod(6, b, m.d);
  p.mm = prod(2, b, b, m.d);
  p.fwd = sum(p.lin, p.norm, prod(2, p.mm));
  p.bwd = prod(2, sum(p.lin, prod(2, p.mm)));
  p.fb = sum(p.fwd, p.bwd);
  p.jvp = prod(2, p.fwd);
  return p;
}

/// C_proto_eval = C_lin(B_eval) + C_norm(B_eval)
inline u128 proto_eval(const CostModel& m) {
  const auto e = primitives(m, m.b_eval);
  return sum(e.lin, e.norm);
}

enum class Method { TracIn, Trak, Chips };

inline std::string_view to_string(Method k) {
  switch (k) {
    case Method::TracIn: return "tracin";
    case Method::Trak: return "trak";
    case Method::Chips: return "chips";
  }
  return "unknown";
}

struct Breakdown {
  u128 eval = 0;      // evaluation direction
  u128 proto = 0;     // evaluation prototypes
  u128 train = 0;     // pool passes
  u128 neg = 0;       // I * Delta_neg
  u128 margin = 0;    // n_train * Delta_margin
  u128 rel = 0;       // n_train * Delta_rel
  u128 total = 0;
};

inline Breakdown method_breakdown(const CostModel& m, Method method) {
  m.validate();
  const auto tr = primitives(m, m.b_train);
  const auto ev = primitives(m, m.b_eval);
  const u128 rp = m.c_rp(), nt = m.n_train(), ne = m.n_eval();
  Breakdown b;
  b.eval = mul(ne, sum(ev.fb, rp));
  if (method == Method::TracIn) {
    b.train = sum(mul(nt, tr.jvp), prod(m.epochs, nt, tr.fb));
  } else {
    b.proto = proto_eval(m);
    b.train = sum(mul(nt, sum(tr.fb, rp)), prod(m.cg_iters, nt, sum(tr.jvp, tr.fb, rp)),
                  mul(nt, sum(tr.jvp, tr.fwd)));
    if (method == Method::Chips) {
      b.neg = prod(m.cg_iters, m.c_neg, m.k);                     // I * c_neg * k
      b.margin = prod(nt, 2, m.b_train, m.b_train);               // n_train * 2 B^2
      b.rel = prod(nt, 4, m.b_train, m.d);                        // n_train * 4 B d
    }
  }
  b.total = sum(b.eval, b.proto, b.train, b.neg, b.margin, b.rel);
  return b;
}

inline u128 method_total(const CostModel& m, Method method) { return method_breakdown(m, method).total; }

}  // namespace chips::flops
