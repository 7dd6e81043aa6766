#include <gtest/gtest.h>

#include <cmath>

#include "chips/baselines.hpp"
#include "test_util.hpp"

using namespace chips;
using chips::testing::to_eigen;

namespace {

EndpointParams random_params(Rng& rng, std::size_t dv, std::size_t dt, std::size_t d) {
  EndpointParams p(dv, dt, d, 0.5);
  p.w_v = random_normal_matrix(rng, dv, d);
  p.w_t = random_normal_matrix(rng, dt, d);
  return p;
}

FeatureBatch random_batch(Rng& rng, std::size_t b, std::size_t dv, std::size_t dt) {
  FeatureBatch fb;
  for (std::size_t i = 0; i < b; ++i) fb.ids.push_back(i);
  fb.h = random_normal_matrix(rng, b, dv);
  fb.t = random_normal_matrix(rng, b, dt);
  return fb;
}

SketchedVector sv(const Vector& v, std::uint64_t fp = 1) { return {v, fp}; }

MomentAccumulator moments(Rng& rng, std::size_t n, std::size_t k, std::uint64_t fp, std::vector<SketchedVector>* out) {
  MomentAccumulator acc(k, fp);
  std::vector<SketchedVector> gs;
  const Vector mu = random_normal_vector(rng, k, 0.5);
  for (std::size_t i = 0; i < n; ++i) {
    Vector g = random_normal_vector(rng, k);
    axpy(1.0, mu, g);
    gs.push_back(sv(g, fp));
  }
  acc.accumulate(gs);
  if (out) *out = gs;
  return acc;
}

}  // namespace

TEST(Dot, SelfInnerProductIsSquaredNorm) {
  const Vector u{1, -2, 2};
  EXPECT_DOUBLE_EQ(score_dot(sv(u), sv(u)), 9.0);
  EXPECT_EQ(score_dot(sv(Vector{1, 0}), sv(Vector{0, 5})), 0.0);
  EXPECT_THROW(score_dot(sv(u, 1), sv(u, 2)), SketchMismatch);
}

TEST(Dot, EqualsIdentityPreconditionedAlignment) {
  Rng rng(1);
  const std::size_t k = 16;
  MomentAccumulator empty(k, 7);
  auto surr = build_surrogate(empty, 0.6, 1.0);
  const Vector u = random_normal_vector(rng, k);
  solve_direction(surr, sv(u, 7), CgOptions{});
  const auto dir = direction_vector(surr);
  for (int t = 0; t < 20; ++t) {
    const auto g = sv(random_normal_vector(rng, k), 7);
    EXPECT_EQ(score_dot(g, sv(u, 7)), alignment_score(g, dir));
  }
}

TEST(TracIn, SingleUnitCheckpointEqualsDot) {
  Rng rng(2);
  const auto p = random_params(rng, 5, 4, 3);
  const auto fb = random_batch(rng, 6, 5, 4);
  const auto space = GradientSpace::exact(p.param_count());
  const auto ge = space.project(random_normal_vector(rng, p.param_count()));
  const TrajectoryPoint traj[] = {{&p, 1.0}};
  const auto scores = tracin_batch_scores(traj, fb, space, ge);
  for (std::size_t i = 0; i < 6; ++i)
    EXPECT_EQ(scores[i], score_dot(space.project(per_sample_gradient(p, fb, i)), ge));
}

TEST(TracIn, DuplicatedCheckpointWithHalvedRate) {
  Rng rng(3);
  const auto p = random_params(rng, 5, 4, 3);
  const auto fb = random_batch(rng, 6, 5, 4);
  const auto space = GradientSpace::exact(p.param_count());
  const auto ge = space.project(random_normal_vector(rng, p.param_count()));
  const TrajectoryPoint one[] = {{&p, 0.2}};
  const TrajectoryPoint two[] = {{&p, 0.1}, {&p, 0.1}};
  const auto a = tracin_batch_scores(one, fb, space, ge), b = tracin_batch_scores(two, fb, space, ge);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(a[i], b[i], 1e-14 * std::max(1.0, std::abs(a[i])));
}

TEST(TracIn, ThreeCheckpointReplay) {
  Rng rng(4);
  std::vector<EndpointParams> ckpts;
  for (int t = 0; t < 3; ++t) ckpts.push_back(random_params(rng, 6, 5, 4));
  const auto fb = random_batch(rng, 5, 6, 5);
  SketchSpec spec;
  spec.k = 20;
  spec.input_dim = ckpts[0].param_count();
  spec.seed = 3;
  const auto space = GradientSpace::sketched(spec);
  const auto ge = space.project(random_normal_vector(rng, spec.input_dim));
  const double etas[] = {0.3, 0.2, 0.1};
  std::vector<TrajectoryPoint> traj;
  for (int t = 0; t < 3; ++t) traj.push_back({&ckpts[t], etas[t]});
  const auto scores = tracin_batch_scores(traj, fb, space, ge);
  const Sketch sk(spec);
  for (std::size_t i = 0; i < 5; ++i) {
    double ref = 0.0;
    for (int t = 0; t < 3; ++t) {
      const Vector g = per_sample_gradient(ckpts[t], fb, i);
      Vector pg(20);
      sk.apply(g, pg);
      ref += etas[t] * dot(pg, ge.data);
    }
    EXPECT_NEAR(scores[i], ref, 1e-12 * std::max(1.0, std::abs(ref)));
  }
}

TEST(TracIn, RejectsShapeMismatchAndEmptyTrajectory) {
  Rng rng(5);
  const auto p = random_params(rng, 5, 4, 3);
  const auto q = random_params(rng, 5, 4, 2);
  const auto fb = random_batch(rng, 3, 5, 4);
  const auto space = GradientSpace::exact(p.param_count());
  const auto ge = space.project(Vector(p.param_count()));
  const TrajectoryPoint bad[] = {{&p, 1.0}, {&q, 1.0}};
  EXPECT_THROW(tracin_batch_scores(bad, fb, space, ge), ShapeError);
  EXPECT_THROW(tracin_batch_scores(std::span<const TrajectoryPoint>{}, fb, space, ge), ConfigError);
  const TrajectoryPoint zero_eta[] = {{&p, 0.0}};
  EXPECT_THROW(tracin_batch_scores(zero_eta, fb, space, ge), ConfigError);
}

TEST(Trak, EmptyMomentReducesToScaledDot) {
  Rng rng(6);
  MomentAccumulator empty(8, 1);
  const Vector u = random_normal_vector(rng, 8);
  const TrakScorer trak(empty, 2.0, sv(u), CgOptions{});
  for (int t = 0; t < 10; ++t) {
    const auto g = sv(random_normal_vector(rng, 8));
    EXPECT_NEAR(trak.score(g), score_dot(g, sv(u)) / 2.0, 1e-14);
  }
}

TEST(Trak, MatchesDenseInverse) {
  Rng rng(7);
  std::vector<SketchedVector> gs;
  const auto acc = moments(rng, 50, 8, 1, &gs);
  const Vector u = random_normal_vector(rng, 8);
  const double lam = 0.05;
  const TrakScorer trak(acc, lam, sv(u), CgOptions{100, 1e-14, {}});
  Eigen::MatrixXd phi = Eigen::MatrixXd::Zero(8, 8);
  for (const auto& g : gs) phi += to_eigen(g.data) * to_eigen(g.data).transpose();
  phi /= 50.0;
  phi += lam * Eigen::MatrixXd::Identity(8, 8);
  const Eigen::VectorXd dir = phi.inverse() * to_eigen(u);
  for (const auto& g : gs) EXPECT_NEAR(trak.score(g), to_eigen(g.data).dot(dir), 1e-8);
}

TEST(Trak, EqualsChipsAlignmentAtAlphaZero) {
  Rng rng(8);
  std::vector<SketchedVector> gs;
  const auto acc = moments(rng, 40, 12, 3, &gs);
  const Vector u = random_normal_vector(rng, 12);
  const double lam = 0.3;
  const CgOptions opts{};
  const TrakScorer trak(acc, lam, sv(u, 3), opts);
  auto surr = build_surrogate(acc, 0.0, lam);
  solve_direction(surr, sv(u, 3), opts);
  const auto dir = direction_vector(surr);
  for (const auto& g : gs) EXPECT_NEAR(trak.score(g), alignment_score(g, dir), 1e-12);
}

TEST(Trak, LargeRidgeRanksLikeDot) {
  Rng rng(9);
  std::vector<SketchedVector> gs;
  const auto acc = moments(rng, 100, 10, 1, &gs);
  const Vector u = random_normal_vector(rng, 10);
  const double phi_norm = detail::power_norm_sym(acc.phi_pos());
  const TrakScorer trak(acc, 1e6 * phi_norm, sv(u), CgOptions{});
  std::vector<double> a, b;
  for (const auto& g : gs) {
    a.push_back(trak.score(g));
    b.push_back(score_dot(g, sv(u)));
  }
  EXPECT_GE(spearman(a, b), 0.9999);
}

TEST(Trak, RejectsBadInputs) {
  MomentAccumulator acc(4, 1);
  EXPECT_THROW(TrakScorer(acc, 0.0, sv(Vector(4)), CgOptions{}), ConfigError);
  EXPECT_THROW(TrakScorer(acc, 1.0, sv(Vector(4), 2), CgOptions{}), SketchMismatch);
}

TEST(ClipScore, ClampedCosine) {
  EXPECT_DOUBLE_EQ(score_clipscore(Vector{1, 0}, Vector{1, 0}), 2.5);
  EXPECT_EQ(score_clipscore(Vector{1, 0}, Vector{0, 1}), 0.0);
  EXPECT_EQ(score_clipscore(Vector{1, 0}, Vector{-1, 0}), 0.0);
  EXPECT_NEAR(score_clipscore(Vector{1, 0}, Vector{0.6, 0.8}), 1.5, 1e-15);
}

TEST(Random, SeededHundredOfThousand) {
  std::vector<std::uint64_t> ids(1000);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = 5000 + i;
  const auto a = select_random(ids, 42, 0.1);
  ASSERT_EQ(a.size(), 100u);
  EXPECT_EQ(a, select_random(ids, 42, 0.1));
  std::set<std::uint64_t> uniq(a.begin(), a.end());
  EXPECT_EQ(uniq.size(), 100u);
  std::vector<std::uint64_t> rev(ids.rbegin(), ids.rend());
  EXPECT_EQ(a, select_random(rev, 42, 0.1));
  EXPECT_NE(a, select_random(ids, 43, 0.1));
}

TEST(Random, SelectionIsUniform) {
  std::vector<std::uint64_t> ids(100);
  for (std::size_t i = 0; i < 100; ++i) ids[i] = i;
  std::vector<int> hits(100, 0);
  for (std::uint64_t s = 0; s < 2000; ++s)
    for (auto id : select_random(ids, s, 0.2)) ++hits[id];
  // each id kept with probability 0.2: mean 400, sd 17.9
  for (int h : hits) {
    EXPECT_GT(h, 400 - 5 * 18);
    EXPECT_LT(h, 400 + 5 * 18);
  }
}

TEST(Concepts, FilterKeepsWhitelistOnly) {
  const ConceptConfig cfg;
  const std::vector<TaggedId> pool{{1, {"Microscopy"}}, {2, {"Tables"}}, {3, {"Other", "Maps"}}, {4, {}}};
  const auto recs = concept_scores(pool, Method::ConceptFilter, cfg, 0);
  std::set<std::uint64_t> kept;
  for (const auto& r : recs) kept.insert(r.id);
  EXPECT_EQ(kept, (std::set<std::uint64_t>{1, 3}));
}

TEST(Concepts, EmptyFilteredPool) {
  const ConceptConfig cfg;
  const std::vector<TaggedId> pool{{1, {"Tables"}}, {2, {"Other"}}};
  EXPECT_THROW(concept_scores(pool, Method::ConceptFilter, cfg, 0), EmptyPool);
}

TEST(Concepts, UnknownTagRejected) {
  const ConceptConfig cfg;
  const std::vector<TaggedId> pool{{1, {"Astronomy"}}};
  EXPECT_THROW(concept_scores(pool, Method::ConceptBalance, cfg, 0), ConfigError);
}

TEST(Concepts, BalanceDownsamplesOverrepresentedAtRate) {
  const ConceptConfig cfg;
  std::vector<TaggedId> pool;
  for (std::uint64_t i = 0; i < 8000; ++i) pool.push_back({i, {i % 2 ? "Tables" : "Microscopy"}});
  const auto recs = concept_scores(pool, Method::ConceptBalance, cfg, 11);
  std::size_t over = 0, other = 0;
  for (const auto& r : recs) (r.id % 2 ? over : other)++;
  EXPECT_EQ(other, 4000u);
  // binomial(4000, 0.25): sd 27.4
  EXPECT_NEAR(double(over), 1000.0, 5 * 27.4);
}
