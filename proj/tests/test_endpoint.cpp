#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "chips/endpoint.hpp"

using namespace chips;

namespace {

EndpointParams random_params(Rng& rng, std::size_t dv, std::size_t dt, std::size_t d, double tau_log) {
  EndpointParams p(dv, dt, d, tau_log);
  p.w_v = random_normal_matrix(rng, dv, d);
  p.w_t = random_normal_matrix(rng, dt, d);
  return p;
}

FeatureBatch random_batch(Rng& rng, std::size_t b, std::size_t dv, std::size_t dt) {
  FeatureBatch fb;
  for (std::size_t i = 0; i < b; ++i) fb.ids.push_back(100 + i);
  fb.h = random_normal_matrix(rng, b, dv);
  fb.t = random_normal_matrix(rng, b, dt);
  return fb;
}

// Scalar-loop reference: x_a = h_a^T W_v normalized, s_ac = tau x_a . y_c.
std::vector<std::vector<double>> reference_logits(const EndpointParams& p, const FeatureBatch& fb) {
  const std::size_t b = fb.size(), d = p.d();
  auto embed = [&](const DenseMatrix& f, const DenseMatrix& w) {
    std::vector<std::vector<double>> e(b, std::vector<double>(d, 0.0));
    for (std::size_t a = 0; a < b; ++a) {
      double n = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        for (std::size_t r = 0; r < w.rows(); ++r) e[a][c] += f(a, r) * w(r, c);
        n += e[a][c] * e[a][c];
      }
      for (auto& v : e[a]) v /= std::sqrt(n);
    }
    return e;
  };
  const auto x = embed(fb.h, p.w_v), y = embed(fb.t, p.w_t);
  std::vector<std::vector<double>> s(b, std::vector<double>(b, 0.0));
  for (std::size_t a = 0; a < b; ++a)
    for (std::size_t c = 0; c < b; ++c) {
      for (std::size_t k = 0; k < d; ++k) s[a][c] += x[a][k] * y[c][k];
      s[a][c] *= std::exp(p.tau_log);
    }
  return s;
}

double reference_loss(const EndpointParams& p, const FeatureBatch& fb, std::size_t i) {
  const auto s = reference_logits(p, fb);
  const std::size_t b = fb.size();
  double row = 0.0, col = 0.0;
  for (std::size_t j = 0; j < b; ++j) {
    row += std::exp(s[i][j] - s[i][i]);
    col += std::exp(s[j][i] - s[i][i]);
  }
  return 0.5 * (std::log(row) + std::log(col));
}

double max_rel_error_vs_fd(const EndpointParams& p, const FeatureBatch& fb, std::size_t i) {
  const Vector g = per_sample_gradient(p, fb, i);
  Vector theta = p.flatten();
  const double h = 1e-5;
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < theta.size(); ++k) {
    EndpointParams q = p;
    const double orig = theta[k];
    theta[k] = orig + h;
    q.assign_flat(theta);
    const double lp = reference_loss(q, fb, i);
    theta[k] = orig - h;
    q.assign_flat(theta);
    const double lm = reference_loss(q, fb, i);
    theta[k] = orig;
    const double fd = (lp - lm) / (2 * h);
    num = std::max(num, std::abs(fd - g[k]));
    den = std::max(den, std::abs(fd));
  }
  return num / std::max(den, 1e-300);
}

FeatureBatch unit_batch(const std::vector<std::vector<double>>& h, const std::vector<std::vector<double>>& t) {
  FeatureBatch fb;
  fb.h = DenseMatrix(h.size(), h[0].size());
  fb.t = DenseMatrix(t.size(), t[0].size());
  for (std::size_t a = 0; a < h.size(); ++a) {
    fb.ids.push_back(a);
    for (std::size_t c = 0; c < h[a].size(); ++c) fb.h(a, c) = h[a][c];
    for (std::size_t c = 0; c < t[a].size(); ++c) fb.t(a, c) = t[a][c];
  }
  return fb;
}

EndpointParams identity_params(std::size_t d, double tau_log) {
  EndpointParams p(d, d, d, tau_log);
  p.w_v = DenseMatrix::identity(d);
  p.w_t = DenseMatrix::identity(d);
  return p;
}

}  // namespace

TEST(Forward, IdentityProjectionUnitLogit) {
  const auto p = identity_params(3, 0.0);
  const auto g = forward(p, unit_batch({{1, 0, 0}}, {{1, 0, 0}}));
  EXPECT_DOUBLE_EQ(g.s(0, 0), 1.0);
}

TEST(Forward, OrthogonalPairHasZeroLogitForAnyTau) {
  for (double tl : {-2.0, 0.0, 3.0}) {
    const auto g = forward(identity_params(2, tl), unit_batch({{1, 0}}, {{0, 1}}));
    EXPECT_EQ(g.s(0, 0), 0.0);
  }
}

TEST(Forward, LogitsMatchScalarLoop) {
  Rng rng(4);
  const auto p = random_params(rng, 8, 8, 8, 0.7);
  const auto fb = random_batch(rng, 4, 8, 8);
  const auto g = forward(p, fb);
  const auto ref = reference_logits(p, fb);
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(g.s(a, c), ref[a][c], 1e-12);
}

TEST(Forward, GeometryInvariants) {
  Rng rng(5);
  const auto p = random_params(rng, 7, 5, 4, 1.3);
  const auto fb = random_batch(rng, 6, 7, 5);
  const auto g = forward(p, fb);
  for (std::size_t a = 0; a < 6; ++a) {
    EXPECT_NEAR(norm2(g.xhat.row(a)), 1.0, 1e-12);
    EXPECT_NEAR(norm2(g.yhat.row(a)), 1.0, 1e-12);
    double rs = 0.0, cs = 0.0;
    for (std::size_t c = 0; c < 6; ++c) {
      rs += g.p_i2t(a, c);
      cs += g.p_t2i(c, a);
    }
    EXPECT_NEAR(rs, 1.0, 1e-12);
    EXPECT_NEAR(cs, 1.0, 1e-12);
  }
}

TEST(Forward, ZeroProjectionReportsSampleId) {
  auto p = identity_params(2, 0.0);
  auto fb = unit_batch({{1, 0}, {0, 0}}, {{1, 0}, {0, 1}});
  fb.ids = {7, 42};
  try {
    forward(p, fb);
    FAIL() << "expected DegenerateEmbedding";
  } catch (const DegenerateEmbedding& e) {
    EXPECT_EQ(e.sample_id(), 42u);
  }
}

TEST(Forward, RejectsShapeMismatch) {
  Rng rng(1);
  const auto p = random_params(rng, 4, 4, 2, 0.0);
  EXPECT_THROW(forward(p, random_batch(rng, 3, 5, 4)), ShapeError);
  FeatureBatch empty;
  empty.h = DenseMatrix(0, 4);
  empty.t = DenseMatrix(0, 4);
  EXPECT_THROW(forward(p, empty), ShapeError);
}

TEST(InfoNce, SingleSampleLossIsZero) {
  Rng rng(2);
  const auto p = random_params(rng, 3, 3, 3, 0.5);
  const auto l = symmetric_infonce(forward(p, random_batch(rng, 1, 3, 3)));
  EXPECT_EQ(l[0], 0.0);
}

TEST(InfoNce, SaturatedMarginVanishes) {
  const auto p = identity_params(2, std::log(50.0));
  const auto l = symmetric_infonce(forward(p, unit_batch({{1, 0}, {0, 1}}, {{1, 0}, {0, 1}})));
  EXPECT_LT(l[0], 1e-20);
  EXPECT_LT(l[1], 1e-20);
  EXPECT_GE(l[0], 0.0);
}

TEST(InfoNce, ZeroLogitsGiveLn2) {
  const auto p = identity_params(2, 0.4);
  const auto l = symmetric_infonce(forward(p, unit_batch({{1, 0}, {1, 0}}, {{0, 1}, {0, 1}})));
  EXPECT_NEAR(l[0], std::log(2.0), 1e-15);
  EXPECT_NEAR(l[1], 0.693147180559945, 1e-15);
}

TEST(InfoNce, MatchesReferenceAndLogSumExpBound) {
  Rng rng(9);
  for (int t = 0; t < 30; ++t) {
    const std::size_t b = 1 + rng.below(8);
    const auto p = random_params(rng, 5, 6, 4, 2.0 * rng.uniform());
    const auto fb = random_batch(rng, b, 5, 6);
    const auto l = symmetric_infonce(forward(p, fb));
    for (std::size_t i = 0; i < b; ++i) {
      EXPECT_GE(l[i], 0.0);
      EXPECT_NEAR(l[i], reference_loss(p, fb, i), 1e-12);
      EXPECT_LE(l[i], std::log(double(b)) + 2.0 * p.tau() + 1e-12);
    }
  }
}

TEST(Gradient, SingleSampleIsZero) {
  Rng rng(3);
  const auto p = random_params(rng, 4, 3, 2, 0.1);
  const Vector g = per_sample_gradient(p, random_batch(rng, 1, 4, 3), 0);
  for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(Gradient, MatchesFiniteDifferencesSmallInstance) {
  Rng rng(2718);
  const auto p = random_params(rng, 6, 5, 4, 0.3);
  const auto fb = random_batch(rng, 4, 6, 5);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_LE(max_rel_error_vs_fd(p, fb, i), 1e-5) << "sample " << i;
}

TEST(Gradient, MatchesFiniteDifferencesRandomInstances) {
  Rng rng(31337);
  for (int t = 0; t < 20; ++t) {
    const std::size_t b = 2 + rng.below(7), dv = 1 + rng.below(16), dt = 1 + rng.below(16),
                      d = 1 + rng.below(16);
    const auto p = random_params(rng, dv, dt, d, rng.uniform() * 2.0 - 0.5);
    const auto fb = random_batch(rng, b, dv, dt);
    EXPECT_LE(max_rel_error_vs_fd(p, fb, rng.below(b)), 1e-5) << "instance " << t;
  }
}

TEST(Gradient, TemperatureComponentVanishesWhenCosinesEqual) {
  // all pairwise cosines 0
  const auto p0 = identity_params(2, 0.9);
  const auto g0 = per_sample_gradient(p0, unit_batch({{1, 0}, {1, 0}, {1, 0}}, {{0, 1}, {0, 1}, {0, 1}}), 1);
  EXPECT_LE(std::abs(g0[g0.size() - 1]), 1e-12);
  // all pairwise cosines 1
  const auto g1 = per_sample_gradient(p0, unit_batch({{1, 0}, {1, 0}, {1, 0}}, {{1, 0}, {1, 0}, {1, 0}}), 0);
  EXPECT_LE(std::abs(g1[g1.size() - 1]), 1e-12);
}

TEST(Gradient, SumOfPerSampleEqualsLossSumGradient) {
  Rng rng(12);
  for (int t = 0; t < 10; ++t) {
    const auto p = random_params(rng, 6, 7, 5, 0.8);
    const auto fb = random_batch(rng, 8, 6, 7);
    const auto g = forward(p, fb);
    Vector sum(p.param_count());
    for (std::size_t i = 0; i < 8; ++i) axpy(1.0, per_sample_gradient(p, fb, g, i), sum);
    const Vector direct = loss_sum_gradient(p, fb, g);
    for (std::size_t k = 0; k < sum.size(); ++k) EXPECT_NEAR(sum[k], direct[k], 1e-10);
  }
}

TEST(Gradient, PermutationEquivariant) {
  Rng rng(13);
  const auto p = random_params(rng, 5, 5, 3, 0.2);
  const auto fb = random_batch(rng, 6, 5, 5);
  std::vector<std::size_t> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  const auto fp = fb.select(perm);
  for (std::size_t r = 0; r < 6; ++r) {
    const Vector a = per_sample_gradient(p, fb, perm[r]);
    const Vector b = per_sample_gradient(p, fp, r);
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
  }
}

TEST(Gradient, OutOfRangeIndex) {
  Rng rng(14);
  const auto p = random_params(rng, 3, 3, 2, 0.0);
  EXPECT_THROW(per_sample_gradient(p, random_batch(rng, 2, 3, 3), 2), IndexOutOfRange);
}

TEST(EvalMean, SingleBatchNoDecayIsArithmeticMean) {
  Rng rng(20);
  const auto p = random_params(rng, 4, 4, 3, 0.0);
  const std::vector<FeatureBatch> bs{random_batch(rng, 5, 4, 4)};
  const Vector u = eval_mean_gradient(p, bs, 0.0);
  Vector ref(p.param_count());
  for (std::size_t i = 0; i < 5; ++i) axpy(0.2, per_sample_gradient(p, bs[0], i), ref);
  for (std::size_t k = 0; k < u.size(); ++k) EXPECT_NEAR(u[k], ref[k], 1e-15);
}

TEST(EvalMean, NoDecayIsMeanOverAllSamples) {
  Rng rng(21);
  const auto p = random_params(rng, 4, 4, 3, 0.0);
  const std::vector<FeatureBatch> bs{random_batch(rng, 3, 4, 4), random_batch(rng, 5, 4, 4)};
  const Vector u = eval_mean_gradient(p, bs, 0.0);
  Vector ref(p.param_count());
  for (const auto& b : bs)
    for (std::size_t i = 0; i < b.size(); ++i) axpy(1.0 / 8.0, per_sample_gradient(p, b, i), ref);
  for (std::size_t k = 0; k < u.size(); ++k) EXPECT_NEAR(u[k], ref[k], 1e-14);
}

TEST(EvalMean, RepeatedBatchIsFixedPoint) {
  Rng rng(22);
  const auto p = random_params(rng, 4, 4, 3, 0.0);
  const auto b = random_batch(rng, 4, 4, 4);
  const std::vector<FeatureBatch> one{b}, two{b, b};
  for (double decay : {0.0, 0.5, 0.9}) {
    const Vector u1 = eval_mean_gradient(p, one, decay), u2 = eval_mean_gradient(p, two, decay);
    for (std::size_t k = 0; k < u1.size(); ++k) EXPECT_NEAR(u1[k], u2[k], 1e-15);
  }
}

TEST(EvalMean, DecayMatchesRecurrenceReplay) {
  Rng rng(23);
  const auto p = random_params(rng, 4, 4, 3, 0.0);
  std::vector<FeatureBatch> bs;
  for (int i = 0; i < 5; ++i) bs.push_back(random_batch(rng, 4, 4, 4));
  const Vector u = eval_mean_gradient(p, bs, 0.9);
  std::vector<double> ref;
  for (std::size_t bi = 0; bi < bs.size(); ++bi) {
    std::vector<double> m(p.param_count(), 0.0);
    for (std::size_t i = 0; i < 4; ++i) {
      const Vector g = per_sample_gradient(p, bs[bi], i);
      for (std::size_t k = 0; k < m.size(); ++k) m[k] += g[k] / 4.0;
    }
    if (bi == 0) {
      ref = m;
    } else {
      for (std::size_t k = 0; k < m.size(); ++k) ref[k] = 0.9 * ref[k] + 0.1 * m[k];
    }
  }
  for (std::size_t k = 0; k < u.size(); ++k) EXPECT_NEAR(u[k], ref[k], 1e-14);
}

TEST(EvalMean, EmptyStreamAndBadDecay) {
  Rng rng(24);
  const auto p = random_params(rng, 2, 2, 2, 0.0);
  EXPECT_THROW(eval_mean_gradient(p, std::span<const FeatureBatch>{}, 0.0), ConfigError);
  EXPECT_THROW(EvalGradientEstimator(1.0), ConfigError);
  EXPECT_THROW(EvalGradientEstimator(-0.1), ConfigError);
}

TEST(Params, FlattenRoundTripAndLayout) {
  Rng rng(25);
  auto p = random_params(rng, 3, 2, 2, 0.25);
  const Vector f = p.flatten();
  ASSERT_EQ(f.size(), 3u * 2 + 2u * 2 + 1);
  EXPECT_EQ(f[0], p.w_v(0, 0));
  EXPECT_EQ(f[6], p.w_t(0, 0));
  EXPECT_EQ(f[10], 0.25);
  EndpointParams q(3, 2, 2);
  q.assign_flat(f);
  EXPECT_EQ(q.flatten(), f);
}
