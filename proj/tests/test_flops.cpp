#include <gtest/gtest.h>

#include <cmath>

#include "chips/flops.hpp"

using namespace chips::flops;

namespace {

u128 u(const char* s) {
  u128 v = 0;
  for (; *s; ++s) v = v * 10 + static_cast<unsigned>(*s - '0');
  return v;
}

// Independent floating-point evaluation of the per-method totals.
double oracle_total(const CostModel& m, Method method) {
  auto prim = [&](double b) {
    const double lin = 2 * b * double(m.d_v + m.d_t) * m.d, norm = 6 * b * m.d, mm = 2 * b * b * m.d;
    const double fwd = lin + norm + 2 * mm, bwd = 2 * (lin + 2 * mm);
    return std::array<double, 5>{lin, norm, fwd, fwd + bwd, 2 * fwd};  // lin norm fwd fb jvp
  };
  const auto tr = prim(double(m.b_train)), ev = prim(double(m.b_eval));
  const double p = double(m.d_v * m.d + m.d_t * m.d + 1), rp = 2 * p;
  const double nt = std::ceil(double(m.n_train_samples) / m.b_train), ne = std::ceil(double(m.n_eval_samples) / m.b_eval);
  const double I = double(m.cg_iters), E = double(m.epochs);
  if (method == Method::TracIn) return ne * (ev[3] + rp) + nt * tr[4] + E * nt * tr[3];
  const double base = ne * (ev[3] + rp) + ev[0] + ev[1] + nt * (tr[3] + rp) + I * nt * (tr[4] + tr[3] + rp) +
                      nt * (tr[4] + tr[2]);
  if (method == Method::Trak) return base;
  return base + I * double(m.c_neg) * double(m.k) + nt * 2 * double(m.b_train) * m.b_train +
         nt * 4 * double(m.b_train) * m.d;
}

}  // namespace

TEST(Flops, PrimitivesMatchReferenceValues) {
  const CostModel m;
  const auto tr = primitives(m, m.b_train);
  EXPECT_EQ(to_string(tr.lin), "42949672960");
  EXPECT_EQ(to_string(tr.norm), "100663296");
  EXPECT_EQ(to_string(tr.mm), "1099511627776");
  EXPECT_EQ(to_string(tr.fwd), "2242073591808");
  EXPECT_EQ(to_string(tr.bwd), "4483945857024");
  EXPECT_EQ(to_string(tr.fb), "6726019448832");
  EXPECT_EQ(to_string(tr.jvp), "4484147183616");
  const auto ev = primitives(m, m.b_eval);
  EXPECT_EQ(ev.lin, u("4456448000"));
  EXPECT_EQ(ev.norm, u("10444800"));
  EXPECT_EQ(ev.mm, u("11837440000"));
  EXPECT_EQ(ev.fwd, u("28141772800"));
  EXPECT_EQ(ev.bwd, u("56262656000"));
  EXPECT_EQ(ev.fb, u("84404428800"));
  EXPECT_EQ(ev.jvp, u("56283545600"));
  EXPECT_EQ(proto_eval(m), u("4466892800"));
}

TEST(Flops, TotalsMatchReferenceSevenDigitValues) {
  const CostModel m;
  EXPECT_EQ(format_sig(method_total(m, Method::TracIn), 7), "5.258869e16");
  EXPECT_EQ(format_sig(method_total(m, Method::Trak), 7), "5.094585e16");
  EXPECT_EQ(format_sig(method_total(m, Method::Chips), 7), "5.094747e16");
  // six-digit rounding of the same totals
  EXPECT_EQ(format_sig(method_total(m, Method::TracIn), 6), "5.25887e16");
  EXPECT_EQ(format_sig(method_total(m, Method::Chips), 6), "5.09475e16");
}

TEST(Flops, TotalsMatchFloatingPointOracle) {
  CostModel m;
  for (auto meth : {Method::TracIn, Method::Trak, Method::Chips}) {
    const double exact = static_cast<double>(method_total(m, meth));
    EXPECT_NEAR(exact / oracle_total(m, meth), 1.0, 1e-12) << to_string(meth);
  }
  m.b_train = 1000;
  m.n_train_samples = 123457;
  m.d = 64;
  m.epochs = 3;
  m.cg_iters = 2;
  for (auto meth : {Method::TracIn, Method::Trak, Method::Chips})
    EXPECT_NEAR(static_cast<double>(method_total(m, meth)) / oracle_total(m, meth), 1.0, 1e-12);
}

TEST(Flops, ChipsMinusTrakIsTheThreeExtras) {
  for (std::uint64_t cg : {1, 5, 9}) {
    CostModel m;
    m.cg_iters = cg;
    const u128 nt = m.n_train();
    const u128 expected = u128(cg) * m.c_neg * m.k + nt * 2 * m.b_train * m.b_train + nt * 4 * m.b_train * m.d;
    EXPECT_EQ(method_total(m, Method::Chips) - method_total(m, Method::Trak), expected);
    const auto b = method_breakdown(m, Method::Chips);
    EXPECT_EQ(b.neg + b.margin + b.rel, expected);
  }
}

TEST(Flops, MonotoneInEpochsIterationsAndPool) {
  CostModel a, b;
  b.epochs = a.epochs + 1;
  EXPECT_GT(method_total(b, Method::TracIn), method_total(a, Method::TracIn));
  EXPECT_EQ(method_total(b, Method::Trak), method_total(a, Method::Trak));
  b = a;
  b.cg_iters = a.cg_iters + 1;
  EXPECT_GT(method_total(b, Method::Trak), method_total(a, Method::Trak));
  EXPECT_GT(method_total(b, Method::Chips), method_total(a, Method::Chips));
  b = a;
  b.n_train_samples = a.n_train_samples * 2;
  for (auto meth : {Method::TracIn, Method::Trak, Method::Chips})
    EXPECT_GT(method_total(b, meth), method_total(a, meth));
}

TEST(Flops, EmptyPoolLeavesOnlyFixedCosts) {
  CostModel m;
  m.n_train_samples = 0;
  EXPECT_EQ(m.n_train(), 0u);
  const auto b = method_breakdown(m, Method::Chips);
  EXPECT_EQ(b.train, 0u);
  EXPECT_EQ(b.margin, 0u);
  EXPECT_EQ(b.total, b.eval + b.proto + b.neg);
  EXPECT_EQ(method_total(m, Method::TracIn), method_breakdown(m, Method::TracIn).eval);
}

TEST(Flops, SketchCostModels) {
  CostModel m;
  const u128 p = m.subspace_dim();
  EXPECT_EQ(p, u128(768 * 512 + 512 * 512 + 1));
  EXPECT_EQ(m.c_rp(), 2 * p);
  m.sketch = SketchCost::SparseSigned;
  EXPECT_EQ(m.c_rp(), 2 * 4 * p);
  m.sketch = SketchCost::DenseGaussian;
  EXPECT_EQ(m.c_rp(), 2 * 4096 * p);
  m.sketch = SketchCost::Srht;
  EXPECT_EQ(m.c_rp(), u128(2) * (1u << 20) * 20);  // P = 655361 pads to 2^20
}

TEST(Flops, OverflowAndValidation) {
  CostModel m;
  m.b_train = m.d_v = m.d_t = m.d = ~std::uint64_t{0};
  EXPECT_THROW(method_total(m, Method::Chips), chips::Overflow);
  CostModel z;
  z.k = 0;
  EXPECT_THROW(z.validate(), chips::ConfigError);
  EXPECT_THROW(format_sig(1, 0), chips::ConfigError);
}

TEST(Flops, FormatSigRounding) {
  EXPECT_EQ(format_sig(0, 3), "0");
  EXPECT_EQ(format_sig(12345, 3), "1.23e4");
  EXPECT_EQ(format_sig(12355, 3), "1.24e4");
  EXPECT_EQ(format_sig(99999, 3), "1.00e5");
  EXPECT_EQ(format_sig(7, 3), "7.00e0");
  EXPECT_EQ(format_sig(5, 1), "5e0");
}
