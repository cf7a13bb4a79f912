#pragma once

#include "fm4pde/common.hpp"
#include "fm4pde/guidance.hpp"
#include "fm4pde/parallel.hpp"
#include "fm4pde/reconstruction.hpp"
#include "fm4pde/samplers.hpp"
#include "fm4pde/scheduler.hpp"
#include "fm4pde/velocity.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

namespace fm4pde {

// Exactly solvable instance: u_t(x) = -x (so Phi_t(x) = t x and J_t = t I)
// with L(x) = ||x||^2 / 2 (PL constant 1, smoothness 1).

struct CheckRecord {
  std::string name;
  std::string analytic_source;  // closed form, fitted slope, bound, ...
  double analytic = 0.0;
  double empirical = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::size_t trials = 0;
  double runtime_s = 0.0;
  std::string note;
};

struct VerificationReport {
  std::vector<CheckRecord> records;

  bool all_pass() const {
    return std::all_of(records.begin(), records.end(), [](const CheckRecord& r) { return r.pass; });
  }
  void append(const VerificationReport& other) {
    records.insert(records.end(), other.records.begin(), other.records.end());
  }

  /// Runtimes are omitted when `timing` is false so that reruns compare equal.
  nlohmann::json to_json(bool timing = true) const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : records) {
      nlohmann::json row{{"name", r.name},         {"analytic_source", r.analytic_source}, {"analytic", r.analytic},
                         {"empirical", r.empirical}, {"tolerance", r.tolerance},             {"pass", r.pass},
                         {"trials", r.trials},     {"note", r.note}};
      if (timing) row["runtime_s"] = r.runtime_s;
      rows.push_back(row);
    }
    return {{"all_pass", all_pass()}, {"checks", rows}};
  }

  void write_csv(std::ostream& out, bool timing = true) const {
    out << "name,analytic_source,analytic,empirical,tolerance,pass,trials" << (timing ? ",runtime_s\n" : "\n");
    char buf[512];
    for (const auto& r : records) {
      std::snprintf(buf, sizeof(buf), "%s,%s,%.10g,%.10g,%.6g,%d,%zu", r.name.c_str(), r.analytic_source.c_str(),
                    r.analytic, r.empirical, r.tolerance, r.pass ? 1 : 0, r.trials);
      out << buf;
      if (timing) {
        std::snprintf(buf, sizeof(buf), ",%.3f", r.runtime_s);
        out << buf;
      }
      out << '\n';
    }
  }
};

namespace detail {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

/// Least-squares slope of y against x.
inline double fit_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxy / sxx;
}

/// Pairwise sum, so chunked reductions are reproducible.
inline double pairwise_sum(const double* v, std::size_t n) {
  if (n <= 8) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += v[i];
    return s;
  }
  const std::size_t h = n / 2;
  return pairwise_sum(v, h) + pairwise_sum(v + h, n - h);
}

}  // namespace detail

/// Steady-state loss of the 1D instance under constant guidance zeta at the
/// terminal noise level delta_min: (t_N^2 / 2) delta^2 / (1 - (1 - zeta)^2 t_N^4).
inline double steady_state_loss_constant(double delta_min, double zeta) {
  if (!(zeta > 0.0 && zeta < 1.0)) throw DomainError("steady_state_loss_constant: zeta must lie in (0, 1)");
  if (!(delta_min > 0.0 && delta_min <= 0.25)) {
    throw DomainError("steady_state_loss_constant: delta_min must lie in (0, 1/4]");
  }
  const double tn = 1.0 - delta_min;
  const double a = (1.0 - zeta) * tn * tn;
  return 0.5 * tn * tn * delta_min * delta_min / (1.0 - a * a);
}

enum class GuidanceSchedule { ConstantZeta, Adaptive };

struct TheoryInstance {
  Eigen::Index dim = 1;
  // Constant guidance: the step at the terminal level is repeated.
  double zeta = 0.05;
  // Adaptive guidance: zeta_k = c_zeta delta_k on delta_{k+1} = (1 - c_delta) delta_k
  // from t = eps_start down to delta_min.
  double c_zeta = 2.0;
  double c_delta = 0.1;
  double eps_start = 0.5;
  double delta_min = 0.1;
  double initial_variance = 1.0;
  std::size_t trials = 1000000;
  std::uint64_t seed = 0;
};

/// delta_0 = 1 - eps_start, delta_{k+1} = (1 - c_delta) delta_k; the last node
/// is clamped to delta_min.
inline std::vector<double> adaptive_delta_schedule(const TheoryInstance& inst) {
  if (!(inst.c_delta > 0.0 && inst.c_delta < 1.0)) throw DomainError("adaptive schedule: c_delta must lie in (0, 1)");
  if (!(inst.delta_min > 0.0 && inst.delta_min < 1.0 - inst.eps_start)) {
    throw DomainError("adaptive schedule: need 0 < delta_min < 1 - eps_start");
  }
  std::vector<double> d{1.0 - inst.eps_start};
  while (d.back() * (1.0 - inst.c_delta) > inst.delta_min * (1.0 + 1e-12)) d.push_back(d.back() * (1.0 - inst.c_delta));
  d.push_back(inst.delta_min);
  return d;
}

/// Coefficients of x_{k+1} = noise_k xi + gain_k x_k for the chosen schedule.
struct ScalarRecursion {
  std::vector<double> noise;
  std::vector<double> gain;
};

/// Constant schedule: `steps` repetitions of the terminal-level step, enough
/// for the second moment to reach its fixed point to relative accuracy 1e-4.
inline ScalarRecursion build_recursion(const TheoryInstance& inst, GuidanceSchedule mode) {
  ScalarRecursion r;
  if (mode == GuidanceSchedule::ConstantZeta) {
    const double d = inst.delta_min;
    const double tn = 1.0 - d;
    const double a = tn * (tn - inst.zeta * tn);
    const double a2 = a * a;
    if (!(a2 < 1.0)) throw DomainError("constant recursion is not contracting");
    const double w_ss = d * d / (1.0 - a2);
    const double gap = std::abs(inst.initial_variance - w_ss);
    std::size_t steps = 1;
    if (gap > 0.0) steps = static_cast<std::size_t>(std::max(1.0, std::ceil(std::log(1e-4 * w_ss / gap) / std::log(a2))));
    r.noise.assign(steps, d);
    r.gain.assign(steps, a);
  } else {
    const auto deltas = adaptive_delta_schedule(inst);
    for (std::size_t k = 0; k + 1 < deltas.size(); ++k) {
      const double t = 1.0 - deltas[k];
      const double tn = 1.0 - deltas[k + 1];
      r.noise.push_back(deltas[k + 1]);
      r.gain.push_back(t * (tn - inst.c_zeta * deltas[k] * t));
    }
  }
  return r;
}

struct RecursionEstimate {
  double loss = 0.0;            // (t_N^2 / 2) E[x_N^2]
  double standard_error = 0.0;  // zero for the exact propagation
  std::size_t steps = 0;
};

/// Exact second-moment propagation W_{k+1} = noise^2 + gain^2 W_k.
inline RecursionEstimate propagate_1d_moment(const TheoryInstance& inst, GuidanceSchedule mode) {
  const auto rec = build_recursion(inst, mode);
  double w = inst.initial_variance;
  for (std::size_t k = 0; k < rec.gain.size(); ++k) w = rec.noise[k] * rec.noise[k] + rec.gain[k] * rec.gain[k] * w;
  const double tn = 1.0 - inst.delta_min;
  return {0.5 * tn * tn * w, 0.0, rec.gain.size()};
}

/// Monte-Carlo simulation of the scalar recursion over inst.trials paths.
inline RecursionEstimate simulate_1d_recursion(const TheoryInstance& inst, GuidanceSchedule mode) {
  if (inst.trials < 2) throw DomainError("simulate_1d_recursion: need at least two trials");
  const auto rec = build_recursion(inst, mode);
  constexpr std::size_t kChunk = 1 << 14;
  const std::size_t chunks = (inst.trials + kChunk - 1) / kChunk;
  std::vector<double> sums(chunks), squares(chunks);
  const double sd0 = std::sqrt(inst.initial_variance);
  parallel_for(chunks, [&](std::size_t c) {
    Rng rng = make_rng(inst.seed, 0x7265630000000000ull + c);
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t begin = c * kChunk;
    const std::size_t end = std::min(inst.trials, begin + kChunk);
    std::vector<double> y(end - begin);
    for (auto& v : y) {
      double x = sd0 * normal(rng);
      for (std::size_t k = 0; k < rec.gain.size(); ++k) x = rec.noise[k] * normal(rng) + rec.gain[k] * x;
      v = x * x;
    }
    sums[c] = detail::pairwise_sum(y.data(), y.size());
    for (auto& v : y) v *= v;
    squares[c] = detail::pairwise_sum(y.data(), y.size());
  });
  const double n = static_cast<double>(inst.trials);
  const double mean = detail::pairwise_sum(sums.data(), chunks) / n;
  const double mean_sq = detail::pairwise_sum(squares.data(), chunks) / n;
  const double var = std::max(0.0, (mean_sq - mean * mean) * n / (n - 1.0));
  const double tn = 1.0 - inst.delta_min;
  const double scale = 0.5 * tn * tn;
  return {scale * mean, scale * std::sqrt(var / n), rec.gain.size()};
}

/// Monte-Carlo steady state against the closed form for every (delta_min,
/// zeta) pair, plus the floor inequality V_ss >= delta_min / 40.
inline VerificationReport verify_lower_bound(const std::vector<std::pair<double, double>>& params,
                                             std::size_t trials, std::uint64_t seed) {
  VerificationReport report;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto [delta, zeta] = params[i];
    detail::Stopwatch clock;
    TheoryInstance inst;
    inst.delta_min = delta;
    inst.zeta = zeta;
    inst.trials = trials;
    inst.seed = seed + i;
    const double closed = steady_state_loss_constant(delta, zeta);
    const auto mc = simulate_1d_recursion(inst, GuidanceSchedule::ConstantZeta);
    char label[96];
    std::snprintf(label, sizeof(label), "lower_bound[delta_min=%g,zeta=%g]", delta, zeta);
    CheckRecord r{label, "closed-form steady state", closed, mc.loss, 3.0 * mc.standard_error,
                  std::abs(mc.loss - closed) <= 3.0 * mc.standard_error, trials, clock.seconds(), ""};
    r.note = "burn-in steps " + std::to_string(mc.steps);
    report.records.push_back(r);
    std::snprintf(label, sizeof(label), "floor[delta_min=%g,zeta=%g]", delta, zeta);
    const bool floor_applies = zeta <= delta / 2.0 && delta <= 0.25;
    report.records.push_back({label, "bound delta_min/40", delta / 40.0, closed, 0.0,
                              !floor_applies || closed >= delta / 40.0, 0, 0.0,
                              floor_applies ? "" : "bound hypotheses not met; informational"});
  }
  return report;
}

struct ContractionConfig {
  double eta = 0.05;
  double t_end = 0.5;  // Phase-A exit: b_t = 1 at t = 1/2
  Eigen::Index dim = 1;
  double x0 = 1.0;     // every coordinate of the fixed start
  double floor = 0.0;  // subtracted before the log fit
  double eps_stab = 0.0;
};

struct ContractionResult {
  std::vector<double> eps_values;
  std::vector<double> exit_losses;
  double slope = 0.0;
  bool eta_admissible = true;
  bool monotone = true;
  VerificationReport report;
};

/// Deterministic sampler on the exact instance from a fixed start, one run per
/// epsilon on the geometric grid [epsilon, t_end]; fits log(V_exit - floor)
/// against log(epsilon).
inline ContractionResult verify_det_contraction(const std::vector<double>& eps_values, const ContractionConfig& cc) {
  if (eps_values.size() < 3) throw DomainError("verify_det_contraction: need at least three epsilon values");
  detail::Stopwatch clock;
  ContractionResult res;
  res.eps_values = eps_values;
  constexpr double kMu = 1.0;
  res.eta_admissible = cc.eta < 1.0 / (2.0 * kMu);
  const LinearOU model(cc.dim);
  const QuadraticObjective objective(1.0);
  const Scheduler sched(cc.eps_stab);
  SamplerConfig scfg;
  scfg.mode = SamplerMode::Deterministic;
  scfg.guidance.clip_norm = 1e300;
  std::vector<double> lx, ly;
  bool ever_clipped = false;
  for (double eps : eps_values) {
    if (!(eps > 0.0 && eps < cc.t_end)) throw DomainError("verify_det_contraction: epsilon must lie in (0, t_end)");
    const TimeGrid grid = geometric_grid(eps, cc.t_end, cc.eta);
    Vector x = Vector::Constant(cc.dim, cc.x0);
    double v = 0.5 * x.squaredNorm();
    for (std::size_t k = 0; k < grid.steps(); ++k) {
      StepRecord rec;
      x = deterministic_step(model, sched, grid.time(k), grid.dt(k), x, objective, scfg, &rec);
      ever_clipped = ever_clipped || rec.clipped;
      const double v_next = 0.5 * x.squaredNorm();
      // Monotone decrease is required while V stays above twice the floor.
      if (v > 2.0 * cc.floor && v_next > v) res.monotone = false;
      v = v_next;
    }
    res.exit_losses.push_back(v);
    if (!(v > cc.floor)) throw DomainError("verify_det_contraction: exit loss does not exceed the floor");
    lx.push_back(std::log(eps));
    ly.push_back(std::log(v - cc.floor));
  }
  res.slope = detail::fit_slope(lx, ly);
  const double secs = clock.seconds();
  res.report.records.push_back({"contraction_exponent", "fitted slope vs 2*mu", 2.0 * kMu, res.slope, 0.4,
                                std::abs(res.slope - 2.0 * kMu) <= 0.4 && !ever_clipped, eps_values.size(), secs,
                                ever_clipped ? "clipping occurred" : ""});
  res.report.records.push_back({"contraction_eta_admissible", "eta < 1/(2 mu)", 1.0 / (2.0 * kMu), cc.eta, 0.0,
                                res.eta_admissible, 0, 0.0,
                                res.eta_admissible ? "" : "step ratio outside the admissible range"});
  res.report.records.push_back({"contraction_phaseA_monotone", "V_{k+1} <= V_k above 2*floor", 1.0,
                                res.monotone ? 1.0 : 0.0, 0.0, res.monotone, eps_values.size(), 0.0, ""});
  return res;
}

struct MomentConfig {
  Eigen::Index dim = 4;
  std::size_t trials = 10000;
  std::size_t uniform_steps = 100;
  double c_zeta = 1.0;
  double c_delta = 0.4;  // grid check parameters
  double epsilon0 = 0.1;
  double spread_tolerance = 0.2;
  std::uint64_t seed = 0;
};

struct MomentRow {
  double delta_min;
  double sup_m2;
  double sup_m4;
  double terminal_m2_constant;   // per coordinate, constant zeta = delta_min / 2
  double terminal_se_constant;
  double steady_state_bound;     // delta^2 / (1 - (1 - zeta)^2 t_N^4)
};

struct MomentResult {
  std::vector<MomentRow> rows;
  double spread_m2 = 0.0;
  double spread_m4 = 0.0;
  VerificationReport report;
};

/// Stochastic sampler on the exact instance under adaptive guidance; the
/// suprema over k of E||x_k||^2 and E||x_k||^4 should not grow as delta_min
/// shrinks.
inline MomentResult verify_moment_bounds(const std::vector<double>& delta_values, const MomentConfig& mc) {
  if (mc.trials == 0) throw DomainError("verify_moment_bounds: trials must be positive");
  if (delta_values.empty()) throw DomainError("verify_moment_bounds: no delta_min values");
  detail::Stopwatch clock;
  MomentResult res;
  const LinearOU model(mc.dim);
  const QuadraticObjective objective(1.0);
  for (std::size_t i = 0; i < delta_values.size(); ++i) {
    const double delta = delta_values[i];
    SamplerConfig cfg;
    cfg.mode = SamplerMode::Stochastic;
    cfg.grid = uniform_grid(0.0, delta, mc.uniform_steps);
    cfg.guidance.c_zeta = mc.c_zeta;
    cfg.seed = mc.seed + i;
    const auto check = validate_grid(cfg.grid, mc.c_delta, mc.epsilon0);
    if (!check.ok()) throw DomainError("verify_moment_bounds: grid fails validation: " + check.violations[0].message);
    const std::size_t n_times = cfg.grid.steps() + 1;

    auto run = [&](const SamplerConfig& c, std::vector<double>& m2, std::vector<double>& m4, std::vector<double>* terminal) {
      std::vector<Eigen::VectorXd> per_trial2(mc.trials, Eigen::VectorXd(n_times));
      std::vector<Eigen::VectorXd> per_trial4(mc.trials, Eigen::VectorXd(n_times));
      parallel_for(mc.trials, [&](std::size_t trial) {
        Rng rng = make_rng(c.seed, 0x6d6f6d0000000000ull + trial);
        Vector x = standard_normal(mc.dim, rng);
        const Scheduler sched(c.eps_stab);
        for (std::size_t k = 0; k <= c.grid.steps(); ++k) {
          const double s = x.squaredNorm();
          per_trial2[trial][k] = s;
          per_trial4[trial][k] = s * s;
          if (k == c.grid.steps()) break;
          x = stochastic_step(model, c.grid.time(k), c.grid.time(k + 1), x, objective, c, rng);
        }
      });
      m2.assign(n_times, 0.0);
      m4.assign(n_times, 0.0);
      std::vector<double> col(mc.trials);
      for (std::size_t k = 0; k < n_times; ++k) {
        for (std::size_t t = 0; t < mc.trials; ++t) col[t] = per_trial2[t][k];
        m2[k] = detail::pairwise_sum(col.data(), col.size()) / static_cast<double>(mc.trials);
        if (terminal && k + 1 == n_times) *terminal = col;
        for (std::size_t t = 0; t < mc.trials; ++t) col[t] = per_trial4[t][k];
        m4[k] = detail::pairwise_sum(col.data(), col.size()) / static_cast<double>(mc.trials);
      }
    };

    std::vector<double> m2, m4;
    run(cfg, m2, m4, nullptr);
    MomentRow row{delta, *std::max_element(m2.begin(), m2.end()), *std::max_element(m4.begin(), m4.end()), 0, 0, 0};

    SamplerConfig constant = cfg;
    constant.adaptive_zeta = false;
    constant.guidance.c_zeta = delta / 2.0;
    std::vector<double> c2, c4, terminal;
    run(constant, c2, c4, &terminal);
    const double d = static_cast<double>(mc.dim);
    double mean = 0.0, sq = 0.0;
    for (double v : terminal) {
      mean += v / d;
      sq += (v / d) * (v / d);
    }
    mean /= static_cast<double>(terminal.size());
    sq /= static_cast<double>(terminal.size());
    row.terminal_m2_constant = mean;
    row.terminal_se_constant = std::sqrt(std::max(0.0, sq - mean * mean) / static_cast<double>(terminal.size()));
    const double tn = 1.0 - delta;
    const double a = (1.0 - delta / 2.0) * tn * tn;
    row.steady_state_bound = delta * delta / (1.0 - a * a);
    res.rows.push_back(row);
  }
  auto spread = [&](auto get) {
    double lo = get(res.rows[0]), hi = lo;
    for (const auto& r : res.rows) {
      lo = std::min(lo, get(r));
      hi = std::max(hi, get(r));
    }
    return hi / lo - 1.0;
  };
  res.spread_m2 = spread([](const MomentRow& r) { return r.sup_m2; });
  res.spread_m4 = spread([](const MomentRow& r) { return r.sup_m4; });
  const double secs = clock.seconds();
  res.report.records.push_back({"moment_sup_m2_spread", "delta_min-independent bound", 0.0, res.spread_m2,
                                mc.spread_tolerance, res.spread_m2 < mc.spread_tolerance, mc.trials, secs, ""});
  res.report.records.push_back({"moment_sup_m4_spread", "delta_min-independent bound", 0.0, res.spread_m4,
                                mc.spread_tolerance, res.spread_m4 < mc.spread_tolerance, mc.trials, 0.0, ""});
  for (const auto& r : res.rows) {
    char label[96];
    std::snprintf(label, sizeof(label), "constant_zeta_terminal[delta_min=%g]", r.delta_min);
    res.report.records.push_back({label, "steady-state lower bound", r.steady_state_bound, r.terminal_m2_constant,
                                  3.0 * r.terminal_se_constant,
                                  r.terminal_m2_constant >= r.steady_state_bound - 3.0 * r.terminal_se_constant,
                                  mc.trials, 0.0, "zeta = delta_min/2"});
  }
  return res;
}

struct ScalingResult {
  std::vector<double> delta_values;
  std::vector<double> exact_losses;
  std::vector<double> mc_losses;
  std::vector<double> mc_errors;
  double slope = 0.0;
  VerificationReport report;
};

/// Terminal loss under adaptive guidance against delta_min on log-log axes;
/// the exact second-moment propagation gives the slope, Monte Carlo
/// cross-checks each point.
inline ScalingResult verify_adaptive_scaling(const std::vector<double>& delta_values, TheoryInstance inst,
                                             double tolerance = 0.15) {
  if (delta_values.size() < 2) throw DomainError("verify_adaptive_scaling: need at least two delta_min values");
  detail::Stopwatch clock;
  ScalingResult res;
  res.delta_values = delta_values;
  std::vector<double> lx, ly;
  bool mc_ok = true;
  for (std::size_t i = 0; i < delta_values.size(); ++i) {
    inst.delta_min = delta_values[i];
    const auto exact = propagate_1d_moment(inst, GuidanceSchedule::Adaptive);
    TheoryInstance mc_inst = inst;
    mc_inst.seed = inst.seed + i;
    const auto mc = simulate_1d_recursion(mc_inst, GuidanceSchedule::Adaptive);
    res.exact_losses.push_back(exact.loss);
    res.mc_losses.push_back(mc.loss);
    res.mc_errors.push_back(mc.standard_error);
    mc_ok = mc_ok && std::abs(mc.loss - exact.loss) <= 4.0 * mc.standard_error;
    lx.push_back(std::log(delta_values[i]));
    ly.push_back(std::log(exact.loss));
  }
  res.slope = detail::fit_slope(lx, ly);
  const double secs = clock.seconds();
  res.report.records.push_back({"adaptive_scaling_slope", "fitted slope vs 1", 1.0, res.slope, tolerance,
                                std::abs(res.slope - 1.0) <= tolerance, inst.trials, secs, ""});
  res.report.records.push_back({"adaptive_scaling_mc_agreement", "exact second moment", 0.0, mc_ok ? 0.0 : 1.0, 0.0,
                                mc_ok, inst.trials, 0.0, "Monte Carlo within 4 standard errors at every delta_min"});
  return res;
}

/// A phase mix: deterministic fraction f of the time axis, ordered either
/// det-then-stoch (switch at t = f) or stoch-then-det (switch at t = 1 - f).
struct MixSpec {
  double det_fraction = 0.0;
  PhaseOrder order = PhaseOrder::DetThenStoch;

  std::string label() const {
    if (det_fraction <= 0.0) return "PureS";
    if (det_fraction >= 1.0) return "PureD";
    char buf[48];
    if (order == PhaseOrder::DetThenStoch) {
      std::snprintf(buf, sizeof(buf), "%.1fD+%.1fS", det_fraction, 1.0 - det_fraction);
    } else {
      std::snprintf(buf, sizeof(buf), "%.1fS+%.1fD", 1.0 - det_fraction, det_fraction);
    }
    return buf;
  }

  SamplerConfig configure(SamplerConfig base, const GridSpec& spec) const {
    if (det_fraction <= 0.0) {
      base.mode = SamplerMode::Stochastic;
      base.grid = make_grid(SamplerMode::Stochastic, order, spec);
    } else if (det_fraction >= 1.0) {
      base.mode = SamplerMode::Deterministic;
      base.grid = make_grid(SamplerMode::Deterministic, order, spec);
    } else {
      base.mode = SamplerMode::Hybrid;
      base.order = order;
      base.grid = make_grid(SamplerMode::Hybrid, order, split_by_steps(spec));
    }
    return base;
  }

  /// Share of a hybrid grid's steps taken by the deterministic phase.
  static double det_step_share(const TimeGrid& grid, PhaseOrder order) {
    std::size_t first = 0;
    for (std::size_t k = 0; k < grid.steps(); ++k) first += grid.time(k) < grid.t_star() ? 1 : 0;
    const double share = static_cast<double>(first) / static_cast<double>(grid.steps());
    return order == PhaseOrder::DetThenStoch ? share : 1.0 - share;
  }

  /// Places the switch so that the deterministic phase takes `det_fraction`
  /// of the steps. The share is monotone in t_star, so bisection suffices.
  GridSpec split_by_steps(GridSpec spec) const {
    const bool det_first = order == PhaseOrder::DetThenStoch;
    double lo = det_first ? spec.epsilon : 0.0, hi = 1.0 - spec.delta_min;
    for (int it = 0; it < 60; ++it) {
      spec.t_star = 0.5 * (lo + hi);
      const double share = det_step_share(make_grid(SamplerMode::Hybrid, order, spec), order);
      // Det share grows with t_star when Det runs first and shrinks otherwise.
      if ((share < det_fraction) == det_first) lo = spec.t_star; else hi = spec.t_star;
    }
    spec.t_star = 0.5 * (lo + hi);
    return spec;
  }
};

/// The comparison grid of mixes: pure modes, det-then-stoch and
/// stoch-then-det at det fractions 0.1, 0.2, 0.3, and 0.8 det-then-stoch.
inline std::vector<MixSpec> default_mixes() {
  return {{1.0, PhaseOrder::DetThenStoch}, {0.0, PhaseOrder::DetThenStoch}, {0.3, PhaseOrder::StochThenDet},
          {0.2, PhaseOrder::StochThenDet}, {0.1, PhaseOrder::StochThenDet}, {0.1, PhaseOrder::DetThenStoch},
          {0.2, PhaseOrder::DetThenStoch}, {0.3, PhaseOrder::DetThenStoch}, {0.8, PhaseOrder::DetThenStoch}};
}

struct MixRow {
  MixSpec mix;
  std::vector<ReconstructionMetrics> runs;

  /// Median of the finite entries; NaN when there are none.
  static double median(std::vector<double> v) {
    v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return !std::isfinite(x); }), v.end());
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  }
  double median_of(double ReconstructionMetrics::*field) const {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.*field);
    return median(v);
  }
};

struct MixTable {
  std::vector<MixRow> rows;

  void write_csv(std::ostream& out) const {
    out << "Sampler,Loss(Coef),Loss(Sol),ObsLoss(Coef),ObsLoss(Sol),PDELoss,runs\n";
    char buf[256];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof(buf), "%s,%.6g,%.6g,%.6g,%.6g,%.6g,%zu\n", r.mix.label().c_str(),
                    r.median_of(&ReconstructionMetrics::rel_err_coef), r.median_of(&ReconstructionMetrics::rel_err_sol),
                    r.median_of(&ReconstructionMetrics::obs_mse_coef), r.median_of(&ReconstructionMetrics::obs_mse_sol),
                    r.median_of(&ReconstructionMetrics::pde_loss), r.runs.size());
      out << buf;
    }
  }

  const MixRow* find(double fraction, PhaseOrder order) const {
    for (const auto& r : rows) {
      const bool pure = fraction <= 0.0 || fraction >= 1.0;
      if (std::abs(r.mix.det_fraction - fraction) < 1e-9 && (pure || r.mix.order == order)) return &r;
    }
    return nullptr;
  }
};

/// Runs every mix on `seeds` reconstructions. Run s uses test field s modulo
/// the number of truths, observation stream s, and trajectory stream s, so
/// all mixes see identical observations and initial noise.
inline MixTable compare_sampler_mixes(const VelocityModel* model, const PDEProblem& problem,
                                      const Normalizer& normalizer, const std::vector<Vector>& truths,
                                      const std::vector<MixSpec>& mixes, std::size_t seeds, Task task,
                                      std::size_t n_obs, const SamplerConfig& base, const GridSpec& spec) {
  if (!model) throw ConfigError("compare_sampler_mixes: no trained model");
  if (truths.empty()) throw ConfigError("compare_sampler_mixes: no test fields");
  MixTable table;
  for (const auto& mix : mixes) {
    MixRow row{mix, std::vector<ReconstructionMetrics>(seeds)};
    const SamplerConfig cfg = mix.configure(base, spec);
    parallel_for(seeds, [&](std::size_t s) {
      const Vector& truth = truths[s % truths.size()];
      const ObservationSet obs = task_observations(problem, truth, task, n_obs, base.seed, s);
      row.runs[s] = reconstruct(*model, problem, normalizer, truth, obs, cfg, s).metrics;
    });
    table.rows.push_back(std::move(row));
  }
  return table;
}

/// Qualitative ordering on median Loss(Sol): PureS within `slack` of the best
/// det-then-stoch mix, det-then-stoch beats stoch-then-det at equal det
/// fraction, and every stoch-then-det mix beats PureD.
inline VerificationReport check_mix_ordering(const MixTable& table, double slack = 1.1) {
  VerificationReport report;
  auto sol = [](const MixRow* r) { return r->median_of(&ReconstructionMetrics::rel_err_sol); };
  const MixRow* pure_s = table.find(0.0, PhaseOrder::DetThenStoch);
  const MixRow* pure_d = table.find(1.0, PhaseOrder::DetThenStoch);
  if (!pure_s || !pure_d) throw ConfigError("check_mix_ordering: table lacks the pure modes");
  double best_ds = std::numeric_limits<double>::infinity();
  for (double f : {0.1, 0.2, 0.3}) {
    const MixRow* ds = table.find(f, PhaseOrder::DetThenStoch);
    const MixRow* sd = table.find(f, PhaseOrder::StochThenDet);
    if (!ds || !sd) continue;
    best_ds = std::min(best_ds, sol(ds));
    report.records.push_back({"mix_order[" + ds->mix.label() + "<" + sd->mix.label() + "]", "median Loss(Sol)",
                              sol(sd), sol(ds), 0.0, sol(ds) < sol(sd), ds->runs.size(), 0.0, ""});
    report.records.push_back({"mix_order[" + sd->mix.label() + "<PureD]", "median Loss(Sol)", sol(pure_d), sol(sd),
                              0.0, sol(sd) < sol(pure_d), sd->runs.size(), 0.0, ""});
  }
  if (std::isfinite(best_ds)) {
    report.records.push_back({"mix_order[PureS<~best D->S]", "median Loss(Sol) times slack", slack * best_ds,
                              sol(pure_s), slack - 1.0, sol(pure_s) <= slack * best_ds, pure_s->runs.size(), 0.0,
                              ""});
  }
  report.records.push_back({"mix_order[PureS<PureD]", "median Loss(Sol)", sol(pure_d), sol(pure_s), 0.0,
                            sol(pure_s) < sol(pure_d), pure_s->runs.size(), 0.0, ""});
  return report;
}

}  // namespace fm4pde
