#include "fm4pde/training.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace fm4pde;

namespace {

NetArchitecture small_arch(Eigen::Index dim) {
  NetArchitecture a;
  a.state_dim = dim;
  a.time_features = 4;
  a.hidden = {4};
  return a;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("fm4pde_test_" + name);
}

}  // namespace

TEST(CfmLoss, ZeroNetworkGivesMeanSquaredDisplacement) {
  VelocityNet net(small_arch(3), Vector::Zero(VelocityNet(small_arch(3), 1).num_params()));
  Rng rng = make_rng(1);
  const Matrix x1 = Matrix::Random(3, 5);
  const CfmDraw draw = draw_cfm(3, 5, rng);
  const double expected = (x1 - draw.noise).squaredNorm() / 15.0;
  EXPECT_NEAR(cfm_loss(net, x1, draw), expected, 1e-14);
}

TEST(CfmLoss, VanishesWhenOutputMatchesTarget) {
  // With zero weights the output is the final bias; a batch whose target
  // x1 - x0 equals that bias in every column has zero loss.
  const auto arch = small_arch(2);
  Vector params = Vector::Zero(VelocityNet(arch, 1).num_params());
  params.tail(2) << 0.25, -0.5;
  const VelocityNet net(arch, params);
  Rng rng = make_rng(2);
  CfmDraw draw = draw_cfm(2, 4, rng);
  Matrix x1 = draw.noise;
  x1.row(0).array() += 0.25;
  x1.row(1).array() -= 0.5;
  Vector grad;
  EXPECT_NEAR(cfm_loss(net, x1, draw, &grad), 0.0, 1e-28);
  EXPECT_LT(grad.norm(), 1e-14);
}

TEST(CfmLoss, GradientMatchesFiniteDifference) {
  const auto arch = small_arch(3);
  VelocityNet net(arch, 7);
  Rng rng = make_rng(3);
  const Matrix x1 = Matrix::Random(3, 6);
  const CfmDraw draw = draw_cfm(3, 6, rng);
  Vector grad;
  cfm_loss(net, x1, draw, &grad);
  const Vector base = net.params();
  const Vector fd = oracle::fd_gradient(
      [&](const Vector& p) {
        VelocityNet probe(arch, p);
        return cfm_loss(probe, x1, draw);
      },
      base, 1e-5);
  EXPECT_LT(oracle::rel_diff(grad, fd), 1e-6);
}

TEST(CfmLoss, GaussianSkipGradientMatchesFiniteDifference) {
  auto arch = small_arch(3);
  arch.skip_std = 0.3;
  VelocityNet net(arch, 8);
  Rng rng = make_rng(4);
  const Matrix x1 = Matrix::Random(3, 6);
  const CfmDraw draw = draw_cfm(3, 6, rng);
  Vector grad;
  cfm_loss(net, x1, draw, &grad);
  const Vector fd = oracle::fd_gradient(
      [&](const Vector& p) {
        VelocityNet probe(arch, p);
        return cfm_loss(probe, x1, draw);
      },
      net.params(), 1e-5);
  EXPECT_LT(oracle::rel_diff(grad, fd), 1e-6);
}

TEST(GaussianSkip, ZeroNetworkIsGaussianFlow) {
  auto arch = small_arch(2);
  arch.skip_std = 0.5;
  const VelocityNet net(arch, Vector::Zero(VelocityNet(arch, 1).num_params()));
  const Vector x = (Vector(2) << 1.0, -2.0).finished();
  // c(0.6) = (0.6 * 0.25 - 0.4) / (0.36 * 0.25 + 0.16) = -0.25 / 0.25.
  EXPECT_TRUE(net.forward(0.6, x).isApprox(-x, 1e-14));
  const GaussianFlow flow(Vector::Zero(2), 0.5);
  EXPECT_TRUE(net.forward(0.3, x).isApprox(flow.velocity(0.3, x), 1e-14));
  arch.skip_std = -1.0;
  EXPECT_THROW(VelocityNet(arch, 1), DomainError);
}

TEST(CfmLoss, ShapeErrors) {
  const VelocityNet net(small_arch(3), 1);
  Rng rng = make_rng(4);
  EXPECT_THROW(cfm_loss(net, Matrix::Zero(2, 4), rng), ContractError);
  EXPECT_THROW(cfm_loss(net, Matrix::Zero(3, 0), rng), DomainError);
}

TEST(Train, ZeroStepsLeavesWeightsUnchanged) {
  VelocityNet net(small_arch(2), 5);
  const Vector before = net.params();
  TrainConfig cfg;
  cfg.steps = 0;
  cfg.batch = 4;
  const auto result = train(net, Matrix::Random(2, 10), cfg);
  EXPECT_EQ(net.params(), before);
  EXPECT_TRUE(result.losses.empty());
  EXPECT_EQ(result.steps_completed, 0);
}

TEST(Train, SameSeedGivesIdenticalTrace) {
  const Matrix data = Matrix::Random(2, 32);
  TrainConfig cfg;
  cfg.steps = 25;
  cfg.batch = 8;
  cfg.seed = 11;
  VelocityNet a(small_arch(2), 3), b(small_arch(2), 3);
  const auto ra = train(a, data, cfg);
  const auto rb = train(b, data, cfg);
  EXPECT_EQ(ra.losses, rb.losses);
  EXPECT_EQ(a.params(), b.params());
}

TEST(Train, LossDecreasesOnGaussianData) {
  Rng rng = make_rng(5);
  Matrix data(1, 512);
  for (Eigen::Index j = 0; j < data.cols(); ++j) data(0, j) = 0.5 + 0.2 * standard_normal(1, rng)[0];
  NetArchitecture arch;
  arch.state_dim = 1;
  arch.time_features = 8;
  arch.hidden = {32, 32};
  VelocityNet net(arch, 6);
  TrainConfig cfg;
  cfg.steps = 1500;
  cfg.batch = 128;
  cfg.lr = 3e-3;
  const auto result = train(net, data, cfg);
  const auto smooth = moving_average(result.losses, 100);
  EXPECT_LT(smooth.back(), 0.8 * smooth[99]);
}

TEST(Train, NonFiniteDataIsDivergence) {
  VelocityNet net(small_arch(2), 1);
  Matrix data = Matrix::Zero(2, 4);
  data(0, 0) = std::numeric_limits<double>::quiet_NaN();
  data(0, 1) = data(0, 2) = data(0, 3) = data(0, 0);
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.batch = 2;
  EXPECT_THROW(train(net, data, cfg), DivergenceError);
}

TEST(Train, ConfigValidation) {
  TrainConfig cfg;
  cfg.batch = 0;
  EXPECT_THROW(cfg.validate(), DomainError);
  cfg = TrainConfig{};
  cfg.lr = -1.0;
  EXPECT_THROW(cfg.validate(), DomainError);
  const auto back = TrainConfig::from_json(TrainConfig{}.to_json());
  EXPECT_EQ(back.steps, TrainConfig{}.steps);
  EXPECT_EQ(back.beta2, TrainConfig{}.beta2);
}

TEST(LearningRate, CosineEndsAtZero) {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.steps = 100;
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 50), 1e-3);
  cfg.cosine = true;
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 0), 1e-3);
  EXPECT_NEAR(learning_rate(cfg, 50), 5e-4, 1e-15);
  EXPECT_NEAR(learning_rate(cfg, 100), 0.0, 1e-18);
}

TEST(MovingAverage, Window) {
  const auto m = moving_average({1, 2, 3, 4}, 2);
  EXPECT_EQ(m, (std::vector<double>{1, 1.5, 2.5, 3.5}));
  EXPECT_THROW(moving_average({1.0}, 0), DomainError);
}

TEST(Weights, RoundTrip) {
  const VelocityNet net(small_arch(3), 9);
  const auto path = temp_path("roundtrip.fm4w");
  save_weights(net, path, 42);
  const auto back = load_weights_file(path, 3);
  EXPECT_EQ(back.net.params(), net.params());
  EXPECT_EQ(back.net.architecture(), net.architecture());
  EXPECT_EQ(back.steps_completed, 42);
  std::filesystem::remove(path);
}

TEST(Weights, RoundTripKeepsGaussianSkip) {
  auto arch = small_arch(3);
  arch.skip_std = 0.1;
  const VelocityNet net(arch, 9);
  const auto path = temp_path("skip.fm4w");
  save_weights(net, path);
  EXPECT_EQ(load_weights(path).architecture(), arch);
  std::filesystem::remove(path);
}

TEST(Weights, TruncatedFileAndDimensionMismatch) {
  const VelocityNet net(small_arch(3), 9);
  const auto path = temp_path("truncated.fm4w");
  save_weights(net, path);
  EXPECT_THROW(load_weights(path, 4), FormatError);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
  EXPECT_THROW(load_weights(path), FormatError);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "NOTAFILE";
  }
  EXPECT_THROW(load_weights(path), FormatError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_weights(path), FormatError);
}
