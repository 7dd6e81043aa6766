#include <gtest/gtest.h>

#include <cmath>

#include "chips/curvature.hpp"
#include "test_util.hpp"

using namespace chips;
using chips::testing::to_eigen;

namespace {

MomentAccumulator exact_acc(std::size_t p) { return MomentAccumulator(p, exact_space_fingerprint(p)); }

DenseMatrix rows_of(const std::vector<Vector>& gs) {
  DenseMatrix m(gs.size(), gs.front().size());
  for (std::size_t r = 0; r < gs.size(); ++r) std::copy(gs[r].begin(), gs[r].end(), m.row(r).begin());
  return m;
}

DenseMatrix random_grads(Rng& rng, std::size_t n, std::size_t p) {
  DenseMatrix g = random_normal_matrix(rng, n, p);
  // shared mean direction so the cross moment is not negligible
  const Vector mu = random_normal_vector(rng, p, 0.7);
  for (std::size_t r = 0; r < n; ++r) axpy(1.0, mu, g.row(r));
  return g;
}

double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.flat().size(); ++i) m = std::max(m, std::abs(a.flat()[i] - b.flat()[i]));
  return m;
}

}  // namespace

TEST(Moments, IdenticalPairGivesOuterProductTwice) {
  const Vector g{1.0, -2.0, 0.5};
  auto acc = exact_acc(3);
  acc.accumulate(rows_of({g, g}));
  const auto pos = acc.phi_pos(), neg = acc.phi_neg();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_DOUBLE_EQ(pos(i, j), g[i] * g[j]);
      EXPECT_DOUBLE_EQ(neg(i, j), g[i] * g[j]);
    }
}

TEST(Moments, OrthogonalPairCrossMomentIsSymmetrizedProduct) {
  const Vector g1{2.0, 0.0, 0.0}, g2{0.0, 3.0, 0.0};
  auto acc = exact_acc(3);
  acc.accumulate(rows_of({g1, g2}));
  const auto neg = acc.phi_neg();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(neg(i, j), 0.5 * (g1[i] * g2[j] + g2[i] * g1[j]));
  EXPECT_EQ(neg.trace(), 0.0);
}

TEST(Moments, MatchDoubleLoopOracle) {
  Rng rng(64);
  const std::size_t n = 64, p = 32;
  const DenseMatrix g = random_grads(rng, n, p);
  auto acc = exact_acc(p);
  acc.accumulate(g);
  DenseMatrix pos(p, p), neg(p, p);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < p; ++j) {
          if (a == b) pos(i, j) += g(a, i) * g(a, j) / double(n);
          else neg(i, j) += g(a, i) * g(b, j) / double(n * (n - 1));
        }
  EXPECT_LE(max_abs_diff(acc.phi_pos(), pos), 1e-12);
  EXPECT_LE(max_abs_diff(acc.phi_neg(), neg), 1e-12);
}

TEST(Moments, SplitInvariance) {
  Rng rng(65);
  const std::size_t n = 60, p = 12;
  const DenseMatrix g = random_grads(rng, n, p);
  auto whole = exact_acc(p);
  whole.accumulate(g);
  for (std::size_t split : {2u, 3u, 7u, 13u, 20u}) {
    auto parts = exact_acc(p);
    for (std::size_t s = 0; s < n; s += split) {
      const std::size_t m = std::min(n, s + split) - s;
      DenseMatrix sub(m, p);
      for (std::size_t r = 0; r < m; ++r) std::copy(g.row(s + r).begin(), g.row(s + r).end(), sub.row(r).begin());
      parts.accumulate(sub);
    }
    EXPECT_LE(max_abs_diff(whole.phi_pos(), parts.phi_pos()), 1e-12) << split;
    EXPECT_LE(max_abs_diff(whole.phi_neg(), parts.phi_neg()), 1e-12) << split;
  }
}

TEST(Moments, CrossMomentIdentity) {
  Rng rng(66);
  for (int t = 0; t < 10; ++t) {
    const std::size_t n = 2 + rng.below(50), p = 1 + rng.below(16);
    const DenseMatrix g = random_grads(rng, n, p);
    auto acc = exact_acc(p);
    acc.accumulate(g);
    const auto pos = acc.phi_pos(), neg = acc.phi_neg();
    const Vector& s = acc.sum_vec();
    double scale_ref = 0.0;
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < p; ++j) scale_ref = std::max(scale_ref, std::abs(s[i] * s[j]));
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < p; ++j) {
        const double lhs = double(n) * (n - 1) * neg(i, j) + double(n) * pos(i, j);
        EXPECT_LE(std::abs(lhs - s[i] * s[j]), 1e-10 * std::max(scale_ref, 1.0));
      }
  }
}

TEST(Moments, MergeMatchesSingleStream) {
  Rng rng(67);
  const std::size_t p = 10;
  const DenseMatrix a = random_grads(rng, 9, p), b = random_grads(rng, 5, p);
  auto single = exact_acc(p);
  single.accumulate(a);
  single.accumulate(b);
  auto left = exact_acc(p), right = exact_acc(p);
  left.accumulate(a);
  right.accumulate(b);
  right.merge(left);
  const auto x = single.phi_neg(), y = right.phi_neg();
  for (std::size_t i = 0; i < x.flat().size(); ++i)
    EXPECT_LE(std::abs(x.flat()[i] - y.flat()[i]), 1e-9 * std::max(1.0, std::abs(x.flat()[i])));
}

TEST(Moments, PopulationMixIsPsd) {
  Rng rng(68);
  const std::size_t n = 4000, p = 16;
  auto acc = exact_acc(p);
  acc.accumulate(random_grads(rng, n, p));
  DenseMatrix h = acc.phi_pos();
  const auto neg = acc.phi_neg();
  for (std::size_t i = 0; i < h.flat().size(); ++i) h.flat()[i] += neg.flat()[i];
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_eigen(h));
  EXPECT_GE(es.eigenvalues().minCoeff(), -1e-8 * es.eigenvalues().maxCoeff());
}

TEST(Moments, SingletonBatchAndMismatchedSpace) {
  auto acc = exact_acc(3);
  EXPECT_THROW(acc.accumulate(rows_of({Vector{1, 2, 3}})), InsufficientBatch);
  EXPECT_THROW(acc.phi_pos(), InsufficientBatch);
  std::vector<SketchedVector> other{{Vector{1, 2, 3}, 17}, {Vector{1, 0, 0}, 17}};
  EXPECT_THROW(acc.accumulate(other), SketchMismatch);
}

TEST(Moments, SketchBeforeAccumulationEqualsSketchOfMoments) {
  Rng rng(69);
  const std::size_t p = 40, n = 30;
  const DenseMatrix g = random_grads(rng, n, p);
  auto exact = exact_acc(p);
  exact.accumulate(g);
  SketchSpec spec;
  spec.kind = SketchKind::SparseSigned;
  spec.k = 12;
  spec.input_dim = p;
  spec.seed = 3;
  const Sketch sk(spec);
  std::vector<SketchedVector> proj;
  for (std::size_t r = 0; r < n; ++r) proj.push_back(sk.apply(g.row(r)));
  MomentAccumulator sketched(spec.k, spec.fingerprint());
  sketched.accumulate(proj);
  for (double alpha : {0.0, 0.6, 1.0}) {
    const DenseMatrix h = exact.mixed(alpha);
    const DenseMatrix after = sketch_matrix(sk, as_apply(h));
    EXPECT_LE(max_abs_diff(sketched.mixed(alpha), after), 1e-10);
  }
}

TEST(Surrogate, AlphaZeroIsPsdPlusRidge) {
  Rng rng(70);
  auto acc = exact_acc(8);
  acc.accumulate(random_grads(rng, 20, 8));
  const auto s = build_surrogate(acc, 0.0, 1e-3);
  ASSERT_TRUE(s.min_eig.has_value());
  EXPECT_GE(*s.min_eig, 1e-3 - 1e-12);
  const auto pos = acc.phi_pos();
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(s.m(i, i), pos(i, i) + 1e-3, 1e-15);
}

TEST(Surrogate, AlphaOneOrthogonalPairClosedFormEigen) {
  const Vector g1{0.3, 0.0, 0.0}, g2{0.0, 0.4, 0.0};
  auto acc = exact_acc(3);
  acc.accumulate(rows_of({g1, g2}));
  const auto s = build_surrogate(acc, 1.0, 0.1);
  const double half = 0.3 * 0.4 / 2.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_eigen(s.m));
  EXPECT_NEAR(es.eigenvalues()(0), 0.1 - half, 1e-15);
  EXPECT_NEAR(es.eigenvalues()(1), 0.1, 1e-15);
  EXPECT_NEAR(es.eigenvalues()(2), 0.1 + half, 1e-15);
  EXPECT_NEAR(*s.min_eig, 0.1 - half, 1e-14);
  EXPECT_NEAR(s.min_eig_lower_bound, 0.1 - half, 1e-12);
}

TEST(Surrogate, IndefiniteReportsLargerLambda) {
  const Vector g1{3.0, 0.0}, g2{0.0, 4.0};
  auto acc = exact_acc(2);
  acc.accumulate(rows_of({g1, g2}));
  try {
    build_surrogate(acc, 1.0, 0.1);
    FAIL() << "expected IndefiniteSurrogate";
  } catch (const IndefiniteSurrogate& e) {
    EXPECT_GT(e.suggested_lambda(), 6.0 - 1e-12);
    EXPECT_NO_THROW(build_surrogate(acc, 1.0, e.suggested_lambda()));
  }
}

TEST(Surrogate, RejectsBadParameters) {
  auto acc = exact_acc(2);
  EXPECT_THROW(build_surrogate(acc, 1.5, 0.1), ConfigError);
  EXPECT_THROW(build_surrogate(acc, -0.1, 0.1), ConfigError);
  EXPECT_THROW(build_surrogate(acc, 0.5, 0.0), ConfigError);
}

TEST(Direction, EmptyAccumulatorGivesScaledU) {
  auto acc = exact_acc(4);
  auto s = build_surrogate(acc, 0.6, 0.5);
  const Vector u{1, -2, 3, 0.25};
  const auto& d = solve_direction(s, u, CgOptions{});
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(d[i], u[i] / 0.5);
}

TEST(Direction, MatchesDenseSolve64) {
  Rng rng(71);
  auto acc = exact_acc(64);
  acc.accumulate(random_grads(rng, 200, 64));
  auto s = build_surrogate(acc, 0.6, 0.5);
  const Vector u = random_normal_vector(rng, 64);
  const auto& d = solve_direction(s, u, CgOptions{500, 1e-13, {}});
  const Eigen::VectorXd oracle = to_eigen(s.m).ldlt().solve(to_eigen(u));
  EXPECT_LE((to_eigen(d) - oracle).norm(), 1e-8);
}

TEST(Direction, MixingWeightChangesDirection) {
  Rng rng(72);
  for (int t = 0; t < 5; ++t) {
    auto acc = exact_acc(10);
    acc.accumulate(random_grads(rng, 40, 10));
    const Vector u = random_normal_vector(rng, 10);
    auto s0 = build_surrogate(acc, 0.0, 0.1), s6 = build_surrogate(acc, 0.6, 0.1);
    const Vector d0 = solve_direction(s0, u, CgOptions{100, 1e-12, {}});
    const Vector d6 = solve_direction(s6, u, CgOptions{100, 1e-12, {}});
    double diff = 0.0;
    for (std::size_t i = 0; i < 10; ++i) diff = std::max(diff, std::abs(d0[i] - d6[i]));
    EXPECT_GT(diff, 1e-6);
  }
}

TEST(Direction, SpaceMismatchRejected) {
  auto acc = exact_acc(3);
  auto s = build_surrogate(acc, 0.6, 1.0);
  EXPECT_THROW(solve_direction(s, SketchedVector{Vector{1, 2, 3}, 99}, CgOptions{}), SketchMismatch);
  EXPECT_THROW(solve_direction(s, Vector{1, 2}, CgOptions{}), ShapeError);
}

TEST(Direction, ScoresIndependentOfScoringOrder) {
  Rng rng(73);
  auto acc = exact_acc(6);
  acc.accumulate(random_grads(rng, 30, 6));
  auto s = build_surrogate(acc, 0.6, 0.2);
  const Vector u = random_normal_vector(rng, 6);
  solve_direction(s, u, CgOptions{});
  const auto dir = direction_vector(s);
  const DenseMatrix pool = random_grads(rng, 10, 6);
  std::vector<double> fwd, rev(10);
  for (std::size_t r = 0; r < 10; ++r) fwd.push_back(dot(pool.row(r), dir.data));
  for (std::size_t r = 10; r-- > 0;) rev[r] = dot(pool.row(r), dir.data);
  EXPECT_EQ(fwd, rev);
}
