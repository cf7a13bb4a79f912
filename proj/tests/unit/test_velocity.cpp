#include "fm4pde/network.hpp"
#include "fm4pde/velocity.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <memory>

using namespace fm4pde;

namespace {
Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}
}  // namespace

TEST(LinearOU, VelocityIsNegatedState) {
  const LinearOU m(2);
  EXPECT_TRUE(evaluate(m, 0.3, vec({2, -1})).isApprox(vec({-2, 1})));
}

TEST(LinearOU, EndpointPredictionIsScaling) {
  const LinearOU m(2);
  EXPECT_TRUE(endpoint_prediction(LinearOU(1), 0.5, vec({2})).isApprox(vec({1})));
  EXPECT_EQ(endpoint_prediction(m, 0.0, vec({3, -3})), vec({0, 0}));
  Rng rng = make_rng(1);
  for (int i = 0; i < 20; ++i) {
    const Vector x = standard_normal(2, rng);
    const double t = 0.05 * i;
    EXPECT_LE((endpoint_prediction(m, t, x) - t * x).norm(), 1e-15 * (1.0 + x.norm()));
  }
}

TEST(LinearOU, EndpointVjpIsTimeScaling) {
  const LinearOU m(1);
  EXPECT_NEAR(vjp_endpoint(m, 0.4, vec({7}), vec({5}))[0], 2.0, 1e-14);
}

TEST(LinearOU, EulerVjp) {
  const LinearOU m(2);
  EXPECT_TRUE(vjp_euler(m, 0.2, 0.1, vec({3, 4}), vec({1, 1})).isApprox(vec({0.9, 0.9})));
}

TEST(LinearOU, Dissipative) {
  const LinearOU m(3);
  Rng rng = make_rng(2);
  for (int i = 0; i < 10; ++i) {
    const Vector x = standard_normal(3, rng);
    EXPECT_NEAR(x.dot(evaluate(m, 0.3, x)), -x.squaredNorm(), 1e-12);
  }
}

TEST(Velocity, ContractErrors) {
  const LinearOU m(2);
  EXPECT_THROW(evaluate(m, 0.5, vec({1})), ContractError);
  EXPECT_THROW(evaluate(m, 1.5, vec({1, 2})), DomainError);
  EXPECT_THROW(vjp_endpoint(m, 0.5, vec({1, 2}), vec({1})), ContractError);
  EXPECT_THROW(vjp_euler(m, 0.5, 0.0, vec({1, 2}), vec({1, 2})), DomainError);
}

TEST(Velocity, TerminalTimeIsIdentity) {
  const GaussianFlow m(vec({0.3, -0.2}), 0.7);
  const Vector x = vec({1.5, 2.5});
  EXPECT_EQ(endpoint_prediction(m, 1.0, x), x);
  EXPECT_EQ(vjp_endpoint(m, 1.0, x, vec({4, 5})), vec({4, 5}));
}

TEST(GaussianFlow, ClosedFormValues) {
  const GaussianFlow standard(vec({0.0}), 1.0);
  EXPECT_NEAR(evaluate(standard, 0.5, vec({3.0}))[0], 0.0, 1e-15);
  EXPECT_NEAR(evaluate(standard, 0.75, vec({1.0}))[0], 0.8, 1e-14);
}

// E[X1 - X0 | X_t = x] by local linear regression over joint draws of the
// linear path; compared against the closed form at a few probes.
TEST(GaussianFlow, MatchesMonteCarloRegression) {
  const double m = 0.5, s = 0.2;
  const GaussianFlow model(vec({m}), s);
  Rng rng = make_rng(3);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double t : {0.3, 0.6, 0.85}) {
    // (X_t, X1 - X0) is jointly Gaussian, so ordinary least squares on a
    // large sample recovers the exact conditional mean line.
    const int n = 400000;
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (int i = 0; i < n; ++i) {
      const double x0 = normal(rng);
      const double x1 = m + s * normal(rng);
      const double xt = t * x1 + (1 - t) * x0;
      const double y = x1 - x0;
      sx += xt;
      sy += y;
      sxx += xt * xt;
      sxy += xt * y;
    }
    const double var_x = (sxx - sx * sx / n) / n;
    const double slope = (sxy - sx * sy / n) / (n * var_x);
    const double intercept = (sy - slope * sx) / n;
    // OLS standard errors from the population residual variance.
    const double var_y = s * s + 1.0;
    const double cov = t * s * s - (1.0 - t);
    const double resid = var_y - cov * cov / var_x;
    const double se_slope = std::sqrt(resid / (n * var_x));
    const double mean_x = sx / n;
    const double se_icpt = std::sqrt(resid / n * (1.0 + mean_x * mean_x / var_x));
    const double model_slope = evaluate(model, t, vec({1.0}))[0] - evaluate(model, t, vec({0.0}))[0];
    const double model_icpt = evaluate(model, t, vec({0.0}))[0];
    EXPECT_NEAR(model_slope, slope, 5.0 * se_slope) << "t=" << t;
    EXPECT_NEAR(model_icpt, intercept, 5.0 * se_icpt) << "t=" << t;
  }
}

TEST(GaussianFlow, MidpointIntegrationPushesToTarget) {
  const double m = 0.5, s = 0.2;
  const GaussianFlow model(vec({m}), s);
  Rng rng = make_rng(4);
  const int trajectories = 4096, steps = 1000;
  double sum = 0, sq = 0;
  for (int i = 0; i < trajectories; ++i) {
    Vector x = standard_normal(1, rng);
    for (int k = 0; k < steps; ++k) {
      const double t = static_cast<double>(k) / steps, dt = 1.0 / steps;
      const Vector mid = x + 0.5 * dt * evaluate(model, t, x);
      x += dt * evaluate(model, t + 0.5 * dt, mid);
    }
    sum += x[0];
    sq += x[0] * x[0];
  }
  const double mean = sum / trajectories;
  const double sd = std::sqrt(sq / trajectories - mean * mean);
  EXPECT_LT(std::abs(mean - m), 0.05 * s);
  EXPECT_LT(std::abs(sd - s), 0.05 * s);
}

TEST(GaussianFlow, VjpMatchesFiniteDifference) {
  const GaussianFlow model(vec({0.2, -0.1, 0.4}), 0.6);
  Rng rng = make_rng(5);
  for (double t : {0.1, 0.5, 0.9}) {
    const Vector x = standard_normal(3, rng), v = standard_normal(3, rng);
    const Vector fd = oracle::fd_gradient([&](const Vector& y) { return v.dot(endpoint_prediction(model, t, y)); }, x);
    EXPECT_LT(oracle::rel_diff(vjp_endpoint(model, t, x, v), fd), 1e-8);
  }
}

class TrainedVelocityVjp : public ::testing::TestWithParam<double> {};

TEST_P(TrainedVelocityVjp, MatchesFiniteDifference) {
  NetArchitecture arch;
  arch.state_dim = 5;
  arch.time_features = 6;
  arch.hidden = {16, 16};
  arch.skip_std = GetParam();
  const auto net = std::make_shared<const VelocityNet>(arch, 11);
  const TrainedVelocity model(net);
  Rng rng = make_rng(6);
  std::uniform_real_distribution<double> time(0.0, 0.99);
  for (int i = 0; i < 20; ++i) {
    const double t = time(rng), dt = 0.05;
    const Vector x = standard_normal(5, rng), v = standard_normal(5, rng);
    const Vector fd_end =
        oracle::fd_gradient([&](const Vector& y) { return v.dot(endpoint_prediction(model, t, y)); }, x);
    EXPECT_LT(oracle::rel_diff(vjp_endpoint(model, t, x, v), fd_end), 1e-5);
    const Vector fd_euler =
        oracle::fd_gradient([&](const Vector& y) { return v.dot(y + dt * evaluate(model, t, y)); }, x);
    EXPECT_LT(oracle::rel_diff(vjp_euler(model, t, dt, x, v), fd_euler), 1e-5);
  }
}

INSTANTIATE_TEST_SUITE_P(GaussianSkip, TrainedVelocityVjp, ::testing::Values(0.0, 0.1));

TEST(Velocity, EndpointVjpIsLinearCombination) {
  NetArchitecture arch;
  arch.state_dim = 4;
  arch.time_features = 4;
  arch.hidden = {8};
  const TrainedVelocity model(std::make_shared<const VelocityNet>(arch, 2));
  Rng rng = make_rng(7);
  const Vector x = standard_normal(4, rng), v = standard_normal(4, rng);
  const double t = 0.3;
  const Vector expected = v + (1.0 - t) * model.velocity_vjp(t, x, v);
  EXPECT_LT((vjp_endpoint(model, t, x, v) - expected).norm(), 1e-14 * expected.norm());
  const Vector small = vjp_euler(model, t, 1e-12, x, v);
  EXPECT_LT((small - v).norm(), 1e-10 * v.norm());
}
