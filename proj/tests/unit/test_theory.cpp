#include "fm4pde/theory.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace fm4pde;

TEST(SteadyState, ClosedFormValue) {
  // 0.81 * 0.01 / (2 (1 - 0.95^2 0.9^4)), evaluated by hand.
  const double hand = 0.81 * 0.01 / (2.0 * (1.0 - 0.9025 * 0.6561));
  EXPECT_NEAR(hand, 0.009930, 5e-7);
  EXPECT_NEAR(steady_state_loss_constant(0.1, 0.05), hand, 1e-15);
}

TEST(SteadyState, StrongGuidanceLimit) {
  EXPECT_NEAR(steady_state_loss_constant(0.1, 1.0 - 1e-9), 0.00405, 1e-10);
}

TEST(SteadyState, DomainErrors) {
  EXPECT_THROW(steady_state_loss_constant(0.1, 0.0), DomainError);
  EXPECT_THROW(steady_state_loss_constant(0.1, 1.0), DomainError);
  EXPECT_THROW(steady_state_loss_constant(0.0, 0.5), DomainError);
}

TEST(SteadyState, FloorHoldsOnLattice) {
  for (int i = 1; i <= 20; ++i) {
    const double delta = 0.25 * i / 20.0;
    for (int j = 1; j <= 20; ++j) {
      const double zeta = 0.5 * delta * j / 20.0;
      EXPECT_GE(steady_state_loss_constant(delta, zeta), delta / 40.0) << delta << " " << zeta;
    }
  }
}

TEST(Recursion, ConstantScheduleReachesFixedPoint) {
  TheoryInstance inst;
  inst.delta_min = 0.1;
  inst.zeta = 0.05;
  for (double w0 : {0.0, 1.0, 25.0}) {
    inst.initial_variance = w0;
    const auto est = propagate_1d_moment(inst, GuidanceSchedule::ConstantZeta);
    EXPECT_NEAR(est.loss, steady_state_loss_constant(0.1, 0.05), 1e-4 * est.loss) << "W0=" << w0;
  }
}

TEST(Recursion, MonteCarloAgreesWithPropagation) {
  TheoryInstance inst;
  inst.trials = 200000;
  inst.seed = 4;
  const auto mc = simulate_1d_recursion(inst, GuidanceSchedule::Adaptive);
  const auto exact = propagate_1d_moment(inst, GuidanceSchedule::Adaptive);
  EXPECT_EQ(mc.steps, exact.steps);
  EXPECT_NEAR(mc.loss, exact.loss, 4.0 * mc.standard_error);
  inst.trials = 1;
  EXPECT_THROW(simulate_1d_recursion(inst, GuidanceSchedule::Adaptive), DomainError);
}

TEST(Recursion, AdaptiveScheduleShrinksGeometrically) {
  TheoryInstance inst;
  inst.delta_min = 0.01;
  const auto d = adaptive_delta_schedule(inst);
  EXPECT_DOUBLE_EQ(d.front(), 0.5);
  EXPECT_DOUBLE_EQ(d.back(), 0.01);
  for (std::size_t k = 0; k + 2 < d.size(); ++k) EXPECT_NEAR(d[k + 1], 0.9 * d[k], 1e-15);
  EXPECT_GT(d[d.size() - 2], d.back());
}

TEST(VerifyLowerBound, AgreesWithClosedForm) {
  const auto report = verify_lower_bound({{0.1, 0.05}, {0.2, 0.1}}, 100000, 1);
  ASSERT_EQ(report.records.size(), 4u);
  EXPECT_TRUE(report.all_pass());
  EXPECT_NEAR(report.records[0].analytic, 0.009930, 5e-7);
}

TEST(VerifyContraction, NeedsThreePoints) {
  EXPECT_THROW(verify_det_contraction({1e-2, 1e-3}, ContractionConfig{}), DomainError);
}

TEST(VerifyContraction, ExitLossDecreasesWithEpsilon) {
  const auto res = verify_det_contraction({1e-2, 1e-3, 1e-4}, ContractionConfig{});
  ASSERT_EQ(res.exit_losses.size(), 3u);
  EXPECT_GT(res.exit_losses[0], res.exit_losses[1]);
  EXPECT_GT(res.exit_losses[1], res.exit_losses[2]);
  EXPECT_TRUE(res.eta_admissible);
  EXPECT_TRUE(res.monotone);
  EXPECT_GT(res.slope, 1.0);
}

TEST(VerifyMoments, RejectsEmptyInput) {
  EXPECT_THROW(verify_moment_bounds({}, MomentConfig{}), DomainError);
  MomentConfig mc;
  mc.trials = 0;
  EXPECT_THROW(verify_moment_bounds({0.1}, mc), DomainError);
}

TEST(VerifyScaling, NeedsTwoPoints) {
  EXPECT_THROW(verify_adaptive_scaling({0.1}, TheoryInstance{}), DomainError);
}

TEST(FitSlope, RecoversLine) {
  EXPECT_NEAR(detail::fit_slope({0, 1, 2, 3}, {1, 3, 5, 7}), 2.0, 1e-14);
}

TEST(Mixes, LabelsAndDefaults) {
  const auto mixes = default_mixes();
  std::vector<std::string> labels;
  for (const auto& m : mixes) labels.push_back(m.label());
  EXPECT_EQ(labels, (std::vector<std::string>{"PureD", "PureS", "0.7S+0.3D", "0.8S+0.2D", "0.9S+0.1D", "0.1D+0.9S",
                                              "0.2D+0.8S", "0.3D+0.7S", "0.8D+0.2S"}));
}

TEST(Mixes, ConfigureSplitsBySteps) {
  const GridSpec spec;
  // Counts steps per phase straight from the grid times.
  auto det_steps = [](const SamplerConfig& c) {
    std::size_t det = 0;
    for (std::size_t k = 0; k < c.grid.steps(); ++k) det += c.phase_at(c.grid.time(k)) == Phase::Det ? 1 : 0;
    return std::pair<std::size_t, std::size_t>{det, c.grid.steps()};
  };
  for (double f : {0.1, 0.2, 0.3, 0.8}) {
    for (PhaseOrder order : {PhaseOrder::DetThenStoch, PhaseOrder::StochThenDet}) {
      const auto cfg = MixSpec{f, order}.configure(SamplerConfig{}, spec);
      EXPECT_EQ(cfg.mode, SamplerMode::Hybrid);
      EXPECT_EQ(cfg.order, order);
      const auto [det, total] = det_steps(cfg);
      EXPECT_LE(std::abs(static_cast<double>(det) - f * static_cast<double>(total)), 1.0) << f << " " << total;
      EXPECT_EQ(cfg.phase_at(cfg.grid.front()), order == PhaseOrder::DetThenStoch ? Phase::Det : Phase::Stoch);
    }
  }
  EXPECT_EQ(MixSpec{0.0}.configure(SamplerConfig{}, spec).mode, SamplerMode::Stochastic);
  EXPECT_EQ(MixSpec{1.0}.configure(SamplerConfig{}, spec).mode, SamplerMode::Deterministic);
}

TEST(Mixes, CsvAndOrderingOnSyntheticTable) {
  MixTable table;
  auto row = [](MixSpec m, double sol) {
    MixRow r{m, {}};
    for (double f : {0.9, 1.0, 1.1}) {
      ReconstructionMetrics metric;
      metric.rel_err_coef = 0.5 * sol * f;
      metric.rel_err_sol = sol * f;
      r.runs.push_back(metric);
    }
    return r;
  };
  const std::vector<double> sols{0.9, 0.2, 0.5, 0.45, 0.4, 0.19, 0.21, 0.22, 0.6};
  const auto mixes = default_mixes();
  for (std::size_t i = 0; i < mixes.size(); ++i) table.rows.push_back(row(mixes[i], sols[i]));
  std::ostringstream csv;
  table.write_csv(csv);
  std::istringstream in(csv.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "Sampler,Loss(Coef),Loss(Sol),ObsLoss(Coef),ObsLoss(Sol),PDELoss,runs");
  std::getline(in, line);
  EXPECT_EQ(line, "PureD,0.45,0.9,nan,nan,0,3");
  const auto report = check_mix_ordering(table);
  EXPECT_TRUE(report.all_pass());
  table.rows[1] = row(mixes[1], 0.95);
  EXPECT_FALSE(check_mix_ordering(table).all_pass());
  table.rows.erase(table.rows.begin());
  EXPECT_THROW(check_mix_ordering(table), ConfigError);
}

TEST(MixRow, MedianIgnoresNonFinite) {
  EXPECT_DOUBLE_EQ(MixRow::median({3.0, std::nan(""), 1.0, 2.0}), 2.0);
  EXPECT_TRUE(std::isnan(MixRow::median({std::nan("")})));
  EXPECT_DOUBLE_EQ(MixRow::median({4.0, 1.0}), 2.5);
}

TEST(Report, CsvHeaderAndJson) {
  VerificationReport r;
  r.records.push_back({"x", "src", 1.0, 1.1, 0.2, true, 10, 0.5, ""});
  std::ostringstream out;
  r.write_csv(out);
  EXPECT_EQ(out.str().substr(0, out.str().find('\n')), "name,analytic_source,analytic,empirical,tolerance,pass,trials,runtime_s");
  EXPECT_TRUE(r.to_json().at("all_pass").get<bool>());
}
