#include "fm4pde/guidance.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <algorithm>

using namespace fm4pde;

namespace {

ObservationSet obs_of(std::vector<Eigen::Index> idx, std::vector<double> vals) {
  ObservationSet o;
  o.indices = std::move(idx);
  o.values = std::move(vals);
  return o;
}

Vector random_state(const PDEProblem& p, Rng& rng) {
  Vector x = standard_normal(p.dim(), rng);
  // Keep Darcy coefficients positive, as in the data.
  if (p.kind() == PdeKind::Darcy) {
    const auto c = p.coefficient_range();
    x.segment(c.begin, c.size()) = x.segment(c.begin, c.size()).array().abs() + 1.0;
  }
  if (p.kind() == PdeKind::Burgers) x *= 0.3;
  return x;
}

}  // namespace

TEST(ObservationLoss, HandValues) {
  Vector x(3);
  x << 1, 2, 3;
  const auto o = obs_of({0, 2}, {1, 1});
  EXPECT_DOUBLE_EQ(observation_loss(x, o), 2.0);
  Vector expected(3);
  expected << 0, 0, 2;
  EXPECT_EQ(observation_loss_grad(x, o), expected);
  Vector single(1);
  single << 5;
  EXPECT_DOUBLE_EQ(observation_loss(single, obs_of({0}, {3})), 4.0);
}

TEST(ObservationLoss, ZeroOnExactMatch) {
  Vector x(4);
  x << 1, -2, 3, 0.5;
  const auto o = obs_of({1, 3}, {-2, 0.5});
  EXPECT_EQ(observation_loss(x, o), 0.0);
  EXPECT_EQ(observation_loss_grad(x, o), Vector::Zero(4));
}

TEST(ObservationLoss, EmptySetIsDomainError) {
  EXPECT_THROW(observation_loss(Vector::Zero(3), ObservationSet{}), DomainError);
  EXPECT_THROW(observation_loss_grad(Vector::Zero(3), ObservationSet{}), DomainError);
}

TEST(ObservationLoss, PermutationInvariant) {
  Rng rng = make_rng(1);
  const Vector x = standard_normal(10, rng);
  const auto a = obs_of({1, 4, 7}, {0.1, 0.2, 0.3});
  const auto b = obs_of({7, 1, 4}, {0.3, 0.1, 0.2});
  EXPECT_DOUBLE_EQ(observation_loss(x, a), observation_loss(x, b));
}

TEST(ObservationLoss, GradientMatchesFiniteDifference) {
  Rng rng = make_rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const Vector x = standard_normal(30, rng);
    const auto o = obs_of({0, 3, 11, 29}, {0.5, -1.0, 2.0, 0.0});
    const Vector fd = oracle::fd_gradient([&](const Vector& y) { return observation_loss(y, o); }, x, 1e-4);
    EXPECT_LT(oracle::rel_diff(observation_loss_grad(x, o), fd), 1e-8);
  }
}

TEST(PdeLoss, HandValues) {
  const auto poisson = PDEProblem::poisson(8);
  EXPECT_EQ(pde_loss(Vector::Zero(poisson.dim()), poisson), 0.0);
  const auto darcy = PDEProblem::darcy(8, 1.0);
  Vector x = Vector::Zero(darcy.dim());
  x.segment(0, 64).setOnes();
  EXPECT_DOUBLE_EQ(pde_loss(x, darcy), 1.0);
  const auto burgers = PDEProblem::burgers(16, 8);
  EXPECT_NEAR(pde_loss(Vector::Constant(burgers.dim(), 0.7), burgers), 0.0, 1e-28);
}

TEST(PdeLoss, LayoutMismatchIsContractError) {
  EXPECT_THROW(pde_loss(Vector::Zero(10), PDEProblem::poisson(8)), ContractError);
}

TEST(PdeLoss, GradientMatchesFiniteDifferenceForEveryKind) {
  Rng rng = make_rng(3);
  const std::vector<PDEProblem> problems{PDEProblem::poisson(6), PDEProblem::helmholtz(6, 2.0),
                                         PDEProblem::darcy(6, 1.0), PDEProblem::burgers(8, 6, 0.05, 0.5)};
  for (const auto& p : problems) {
    for (int trial = 0; trial < 5; ++trial) {
      const Vector x = random_state(p, rng);
      const Vector fd = oracle::fd_gradient([&](const Vector& y) { return pde_loss(y, p); }, x, 1e-5);
      EXPECT_LT(oracle::rel_diff(pde_loss_grad(x, p), fd), 1e-6) << to_string(p.kind());
    }
  }
}

TEST(PdeLoss, ZeroResidualGivesZeroGradient) {
  const auto p = PDEProblem::poisson(10);
  EXPECT_EQ(pde_loss_grad(Vector::Zero(p.dim()), p).norm(), 0.0);
}

TEST(CompositeGradient, SingleTermReductions) {
  const auto p = PDEProblem::poisson(6);
  Rng rng = make_rng(4);
  const Vector x = standard_normal(p.dim(), rng);
  const auto o = obs_of({2, 9, 40}, {0.1, 0.2, 0.3});
  GuidanceConfig cfg;
  cfg.zeta_obs = 3.0;
  cfg.zeta_pde = 0.0;
  EXPECT_TRUE(composite_gradient(x, o, p, cfg).isApprox(3.0 * observation_loss_grad(x, o)));
  cfg.zeta_obs = 0.0;
  cfg.zeta_pde = 0.5;
  EXPECT_TRUE(composite_gradient(x, o, p, cfg).isApprox(0.5 * pde_loss_grad(x, p)));
}

TEST(CompositeGradient, ZeroAtConsistentExactMatch) {
  const auto p = PDEProblem::poisson(6);
  const Vector x = Vector::Zero(p.dim());
  const auto o = obs_of({1, 5}, {0.0, 0.0});
  GuidanceConfig cfg;
  cfg.zeta_obs = 1.0;
  cfg.zeta_pde = 1.0;
  EXPECT_EQ(composite_gradient(x, o, p, cfg).norm(), 0.0);
}

TEST(CompositeGradient, LinearInWeights) {
  const auto p = PDEProblem::helmholtz(6, 1.0);
  Rng rng = make_rng(5);
  const Vector x = standard_normal(p.dim(), rng);
  const auto o = obs_of({0, 13, 50}, {1.0, -1.0, 0.5});
  GuidanceConfig one{0.75, 0.25, 1.0, 1e3};
  GuidanceConfig two{1.5, 0.5, 1.0, 1e3};
  EXPECT_EQ(composite_gradient(x, o, p, two), 2.0 * composite_gradient(x, o, p, one));
}

TEST(ClipGradient, Examples) {
  Vector g(2);
  g << 3, 4;
  EXPECT_EQ(clip_gradient(g, 10.0), g);
  Vector clipped(2);
  clipped << 0.6, 0.8;
  EXPECT_TRUE(clip_gradient(g, 1.0).isApprox(clipped));
  EXPECT_EQ(clip_gradient(Vector::Zero(3), 1.0), Vector::Zero(3));
  EXPECT_THROW(clip_gradient(g, 0.0), DomainError);
}

TEST(ClipGradient, PreservesDirectionAndBound) {
  Rng rng = make_rng(6);
  for (int i = 0; i < 50; ++i) {
    const Vector g = 10.0 * standard_normal(8, rng);
    const double gc = 5.0;
    const auto r = clip_gradient_report(g, gc);
    EXPECT_LE(r.gradient.norm(), gc * (1 + 1e-15));
    EXPECT_LT((r.gradient * g.norm() - g * std::min(g.norm(), gc)).norm(), 1e-12 * g.norm() * gc);
    EXPECT_EQ(r.clipped, g.norm() > gc);
  }
}

TEST(AdaptiveZeta, Examples) {
  EXPECT_DOUBLE_EQ(adaptive_zeta(2.0, 0.25), 0.5);
  EXPECT_DOUBLE_EQ(adaptive_zeta(7.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(adaptive_zeta(1.0, 1.0), 1.0);
}

TEST(SampleObservations, FullObservationPinsTheField) {
  const auto p = PDEProblem::poisson(5);
  Rng rng = make_rng(7);
  const Vector x = standard_normal(p.dim(), rng);
  const auto o = sample_observations(p, x, static_cast<std::size_t>(p.dim()), ChannelMask::Both, rng);
  EXPECT_EQ(observation_loss(x, o), 0.0);
  Vector y = x;
  y[17] += 1e-3;
  EXPECT_GT(observation_loss(y, o), 0.0);
}

TEST(SampleObservations, Errors) {
  const auto p = PDEProblem::poisson(5);
  Rng rng = make_rng(8);
  const Vector x = Vector::Zero(p.dim());
  EXPECT_THROW(sample_observations(p, x, 0, ChannelMask::Both, rng), DomainError);
  EXPECT_THROW(sample_observations(p, x, 26, ChannelMask::Coefficient, rng), DomainError);
}

TEST(SampleObservations, DeterministicDistinctAndMasked) {
  const auto p = PDEProblem::burgers(128, 128);
  const Vector x = Vector::LinSpaced(p.dim(), 0.0, 1.0);
  Rng a = make_rng(9), b = make_rng(9);
  const auto oa = sample_observations(p, x, 500, ChannelMask::Both, a);
  const auto ob = sample_observations(p, x, 500, ChannelMask::Both, b);
  EXPECT_EQ(oa.indices, ob.indices);
  EXPECT_EQ(std::adjacent_find(oa.indices.begin(), oa.indices.end()), oa.indices.end());
  EXPECT_TRUE(std::is_sorted(oa.indices.begin(), oa.indices.end()));
  const auto sp = PDEProblem::poisson(16);
  Rng c = make_rng(10);
  const auto forward = sample_observations(sp, Vector::Zero(sp.dim()), 100, ChannelMask::Coefficient, c);
  for (auto i : forward.indices) EXPECT_TRUE(sp.coefficient_range().contains(i));
  const auto inverse = sample_observations(sp, Vector::Zero(sp.dim()), 100, ChannelMask::Solution, c);
  for (auto i : inverse.indices) EXPECT_TRUE(sp.solution_range().contains(i));
}

TEST(ObservationSet, JsonRoundTripAndValidation) {
  auto o = obs_of({1, 4, 9}, {0.5, -0.25, 3.0});
  o.channels = ChannelMask::Solution;
  const auto back = ObservationSet::from_json(o.to_json());
  EXPECT_EQ(back.indices, o.indices);
  EXPECT_EQ(back.values, o.values);
  EXPECT_EQ(back.channels, ChannelMask::Solution);
  auto bad = o.to_json();
  bad["indices"] = {4, 1, 9};
  EXPECT_THROW(ObservationSet::from_json(bad), FormatError);
  bad = o.to_json();
  bad["channels"] = {"velocity"};
  EXPECT_THROW(ObservationSet::from_json(bad), FormatError);
}

TEST(FieldObjective, GradientMatchesFiniteDifferenceThroughNormalizer) {
  const auto p = PDEProblem::darcy(6, 1.0);
  const Normalizer norm(p, {8.0, 4.0}, {0.01, 0.02});
  Rng rng = make_rng(11);
  Vector truth = random_state(p, rng);
  const auto obs = sample_observations(p, truth, 20, ChannelMask::Both, rng);
  const FieldObjective objective(p, obs, GuidanceConfig{2.0, 0.3, 1.0, 1e3}, norm);
  const Vector z = standard_normal(p.dim(), rng) * 0.1;
  const auto total = [&](const Vector& y) {
    const auto l = objective.losses(y);
    return 2.0 * l.obs + 0.3 * l.pde;
  };
  const Vector fd = oracle::fd_gradient(total, z, 1e-6);
  EXPECT_LT(oracle::rel_diff(objective.gradient(z), fd), 1e-6);
}
