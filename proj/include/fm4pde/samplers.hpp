#pragma once

#include "fm4pde/common.hpp"
#include "fm4pde/guidance.hpp"
#include "fm4pde/parallel.hpp"
#include "fm4pde/scheduler.hpp"
#include "fm4pde/velocity.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

namespace fm4pde {

enum class SamplerMode { Deterministic, Stochastic, Hybrid };
/// Which phase runs first in Hybrid mode.
enum class PhaseOrder { DetThenStoch, StochThenDet };
enum class Phase { Det, Stoch };

inline std::string to_string(SamplerMode m) {
  switch (m) {
    case SamplerMode::Deterministic: return "deterministic";
    case SamplerMode::Stochastic: return "stochastic";
    case SamplerMode::Hybrid: return "hybrid";
  }
  return "unknown";
}

inline SamplerMode sampler_mode_from_string(const std::string& s) {
  if (s == "deterministic") return SamplerMode::Deterministic;
  if (s == "stochastic") return SamplerMode::Stochastic;
  if (s == "hybrid") return SamplerMode::Hybrid;
  throw ConfigError("sampling.mode: unknown mode '" + s + "'");
}

/// Parameters from which a sampler's time grid is built.
struct GridSpec {
  double epsilon = 1e-3;      // first time of a deterministic phase starting near 0
  double eta = 0.05;          // geometric ratio of deterministic steps
  double t_star = 0.5;        // phase switch
  double delta_min = 0.02;    // stochastic phases stop at 1 - delta_min
  std::size_t uniform_steps = 100;  // stochastic steps over [0, 1 - delta_min]

  nlohmann::json to_json() const {
    return {{"epsilon", epsilon}, {"eta", eta}, {"t_star", t_star}, {"delta_min", delta_min},
            {"uniform_steps", uniform_steps}};
  }
  static GridSpec from_json(const nlohmann::json& j) {
    GridSpec g;
    g.epsilon = j.value("epsilon", g.epsilon);
    g.eta = j.value("eta", g.eta);
    g.t_star = j.value("t_star", g.t_star);
    g.delta_min = j.value("delta_min", g.delta_min);
    g.uniform_steps = j.value("uniform_steps", g.uniform_steps);
    return g;
  }
};

/// Uniform stochastic segment from t0 to t1 with step density matching
/// `spec.uniform_steps` over the full stochastic range.
inline std::vector<double> uniform_segment(const GridSpec& spec, double t0, double t1) {
  const double full = 1.0 - spec.delta_min;
  const auto n = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround(static_cast<double>(spec.uniform_steps) * (t1 - t0) / full)));
  std::vector<double> times(n + 1);
  for (std::size_t k = 0; k <= n; ++k) times[k] = t0 + (t1 - t0) * static_cast<double>(k) / static_cast<double>(n);
  times.back() = t1;
  return times;
}

inline TimeGrid make_grid(SamplerMode mode, PhaseOrder order, const GridSpec& spec) {
  switch (mode) {
    case SamplerMode::Deterministic:
      return geometric_grid(spec.epsilon, 1.0, spec.eta);
    case SamplerMode::Stochastic:
      return uniform_grid(0.0, spec.delta_min, spec.uniform_steps);
    case SamplerMode::Hybrid:
      break;
  }
  if (!(spec.t_star > 0.0 && spec.t_star < 1.0 - spec.delta_min)) {
    throw ConfigError("hybrid grid: t_star must lie in (0, 1 - delta_min)");
  }
  if (order == PhaseOrder::DetThenStoch) {
    if (spec.t_star <= spec.epsilon) throw ConfigError("hybrid grid: t_star must exceed epsilon");
    const double full = 1.0 - spec.delta_min;
    const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(
                                                static_cast<double>(spec.uniform_steps) * (full - spec.t_star) / full)));
    return hybrid_grid(spec.epsilon, spec.eta, spec.t_star, spec.delta_min, n);
  }
  std::vector<double> times = uniform_segment(spec, 0.0, spec.t_star);
  const TimeGrid tail = geometric_grid(spec.t_star, 1.0, spec.eta);
  times.insert(times.end(), tail.times().begin() + 1, tail.times().end());
  return TimeGrid(TimeGrid::Kind::Hybrid, std::move(times), 0.0, spec.t_star, spec.eta);
}

struct SamplerConfig {
  SamplerMode mode = SamplerMode::Hybrid;
  PhaseOrder order = PhaseOrder::DetThenStoch;
  TimeGrid grid = make_grid(SamplerMode::Hybrid, PhaseOrder::DetThenStoch, GridSpec{});
  GuidanceConfig guidance;
  /// Step size of the stochastic guidance term: c_zeta (1 - t_k) when adaptive,
  /// the constant c_zeta otherwise.
  bool adaptive_zeta = true;
  /// Deterministic mode: skip guidance on a step starting at t = 0.
  bool unguided_first_step = false;
  /// Ablation: use the raw gradient at the predicted point instead of its
  /// pullback through the predictor.
  bool endpoint_gradient_only = false;
  /// Stochastic steps only record whether ||g|| > G_c unless this is set.
  bool clip_stochastic = false;
  double eps_stab = 1e-3;
  std::uint64_t seed = 0;

  Phase phase_at(double t) const {
    switch (mode) {
      case SamplerMode::Deterministic: return Phase::Det;
      case SamplerMode::Stochastic: return Phase::Stoch;
      case SamplerMode::Hybrid: break;
    }
    const bool before = t < grid.t_star();
    if (order == PhaseOrder::DetThenStoch) return before ? Phase::Det : Phase::Stoch;
    return before ? Phase::Stoch : Phase::Det;
  }

  void validate() const {
    if (grid.steps() < 1) throw ConfigError("sampler: grid has no steps");
    if (mode == SamplerMode::Hybrid &&
        !(grid.t_star() > grid.front() && grid.t_star() < grid.back()) &&
        !(order == PhaseOrder::DetThenStoch && grid.t_star() <= grid.front())) {
      throw ConfigError("sampler: hybrid t_star must lie strictly inside the grid");
    }
    if (!(guidance.clip_norm > 0.0)) throw ConfigError("sampler: clip_norm must be positive");
  }
};

struct StepRecord {
  std::size_t k = 0;
  double t = 0.0;
  double loss_obs = 0.0;
  double loss_pde = 0.0;
  double grad_norm = 0.0;
  bool clipped = false;
  Phase phase = Phase::Det;
};

struct SampleTrace {
  std::vector<StepRecord> steps;
  Vector final_state;        // x_N in sampler (normalized) coordinates
  Vector final_prediction;   // Phi_{t_N}(x_N), the returned sample
  LossParts final_losses;    // objective evaluated on final_prediction

  void write_csv(std::ostream& out) const {
    out << "k,t,L_obs,L_pde,grad_norm,clipped,phase\n";
    char buf[160];
    for (const auto& r : steps) {
      std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%d,%s\n", r.k, r.t, r.loss_obs, r.loss_pde,
                    r.grad_norm, r.clipped ? 1 : 0, r.phase == Phase::Det ? "det" : "stoch");
      out << buf;
    }
  }
};

namespace detail {
inline void check_finite_state(const Vector& x, std::size_t k) {
  if (!x.allFinite()) throw DivergenceError("sampler diverged: non-finite state after step " + std::to_string(k));
}
}  // namespace detail

/// Deterministic guided step from t to t + dt (Euler predictor, then a
/// b_t-scaled guidance correction using the clipped gradient pulled back
/// through the predictor).
inline Vector deterministic_step(const VelocityModel& model, const Scheduler& sched, double t, double dt,
                                 const Vector& x, const GuidanceObjective& objective, const SamplerConfig& cfg,
                                 StepRecord* record = nullptr) {
  if (!(t >= 0.0 && t < 1.0)) throw DomainError("deterministic_step: t must lie in [0, 1)");
  if (!(dt > 0.0) || t + dt > 1.0 + 1e-12) throw DomainError("deterministic_step: need dt > 0 and t + dt <= 1");
  const Vector predicted = x + dt * evaluate(model, t, x);
  StepRecord rec;
  rec.t = t;
  rec.phase = Phase::Det;
  Vector next = predicted;
  const bool skip = cfg.unguided_first_step && t == 0.0;
  if (objective.active() && !skip) {
    const Vector g_bar = objective.gradient(predicted);
    const Vector g = cfg.endpoint_gradient_only ? g_bar : vjp_euler(model, t, dt, x, g_bar);
    const ClipResult clip = clip_gradient_report(g, cfg.guidance.clip_norm);
    rec.grad_norm = clip.norm;
    rec.clipped = clip.clipped;
    next -= dt * sched.b(t) * clip.gradient;
  }
  if (record) {
    const LossParts l = objective.losses(predicted);
    rec.loss_obs = l.obs;
    rec.loss_pde = l.pde;
    *record = rec;
  }
  return next;
}

/// Stochastic guided step from t to t_next: predict the endpoint, re-noise
/// to level t_next, then subtract the guidance gradient pulled back through
/// the endpoint map.
inline Vector stochastic_step(const VelocityModel& model, double t, double t_next, const Vector& x,
                              const GuidanceObjective& objective, const SamplerConfig& cfg, Rng& rng,
                              StepRecord* record = nullptr, Vector* endpoint = nullptr) {
  if (!(t >= 0.0 && t < t_next && t_next <= 1.0)) {
    throw DomainError("stochastic_step: need 0 <= t < t_next <= 1");
  }
  const Vector x1_hat = endpoint_prediction(model, t, x);
  Vector next = t_next * x1_hat;
  if (t_next < 1.0) next += (1.0 - t_next) * standard_normal(x.size(), rng);
  StepRecord rec;
  rec.t = t;
  rec.phase = Phase::Stoch;
  if (objective.active()) {
    const Vector g_bar = objective.gradient(x1_hat);
    const Vector g = cfg.endpoint_gradient_only ? g_bar : vjp_endpoint(model, t, x, g_bar);
    const ClipResult clip = clip_gradient_report(g, cfg.guidance.clip_norm);
    rec.grad_norm = clip.norm;
    rec.clipped = clip.clipped;
    const double step = cfg.adaptive_zeta ? adaptive_zeta(cfg.guidance.c_zeta, 1.0 - t) : cfg.guidance.c_zeta;
    next -= step * (cfg.clip_stochastic ? clip.gradient : g);
  }
  if (record) {
    const LossParts l = objective.losses(x1_hat);
    rec.loss_obs = l.obs;
    rec.loss_pde = l.pde;
    *record = rec;
  }
  if (endpoint) *endpoint = x1_hat;
  return next;
}

/// Runs one trajectory from x0 over cfg.grid.
inline SampleTrace sample_from(const VelocityModel& model, const GuidanceObjective& objective,
                               const SamplerConfig& cfg, Vector x, Rng& rng, bool record_losses = true) {
  cfg.validate();
  require_dim(x, model.dim(), "sampler initial state");
  const Scheduler sched(cfg.eps_stab);
  const TimeGrid& grid = cfg.grid;
  SampleTrace trace;
  trace.steps.reserve(grid.steps());
  for (std::size_t k = 0; k < grid.steps(); ++k) {
    const double t = grid.time(k);
    StepRecord rec;
    StepRecord* rp = record_losses ? &rec : nullptr;
    if (cfg.phase_at(t) == Phase::Det) {
      x = deterministic_step(model, sched, t, grid.dt(k), x, objective, cfg, rp);
    } else {
      x = stochastic_step(model, t, grid.time(k + 1), x, objective, cfg, rng, rp);
    }
    detail::check_finite_state(x, k);
    rec.k = k;
    rec.phase = cfg.phase_at(t);
    trace.steps.push_back(rec);
  }
  trace.final_state = x;
  trace.final_prediction = endpoint_prediction(model, grid.back(), x);
  detail::check_finite_state(trace.final_prediction, grid.steps());
  trace.final_losses = objective.losses(trace.final_prediction);
  return trace;
}

/// Trajectory `index` of a run: x0 ~ N(0, I) and all noise drawn from
/// stream (seed, index).
inline SampleTrace sample(const VelocityModel& model, const GuidanceObjective& objective, const SamplerConfig& cfg,
                          std::uint64_t index = 0, bool record_losses = true) {
  Rng rng = make_rng(cfg.seed, 0x73616d0000000000ull + index);
  Vector x0 = standard_normal(model.dim(), rng);
  return sample_from(model, objective, cfg, std::move(x0), rng, record_losses);
}

/// `count` independent trajectories in parallel; result i uses stream i.
inline std::vector<SampleTrace> sample_batch(const VelocityModel& model, const GuidanceObjective& objective,
                                             const SamplerConfig& cfg, std::size_t count, bool record_losses = false) {
  std::vector<SampleTrace> out(count);
  parallel_for(count, [&](std::size_t i) { out[i] = sample(model, objective, cfg, i, record_losses); });
  return out;
}

inline nlohmann::json sampler_config_to_json(const SamplerConfig& c) {
  return {{"mode", to_string(c.mode)},
          {"order", c.order == PhaseOrder::DetThenStoch ? "det_then_stoch" : "stoch_then_det"},
          {"grid", c.grid.to_json()},
          {"guidance",
           {{"zeta_obs", c.guidance.zeta_obs},
            {"zeta_pde", c.guidance.zeta_pde},
            {"c_zeta", c.guidance.c_zeta},
            {"clip_norm", c.guidance.clip_norm}}},
          {"adaptive_zeta", c.adaptive_zeta},
          {"unguided_first_step", c.unguided_first_step},
          {"endpoint_gradient_only", c.endpoint_gradient_only},
          {"clip_stochastic", c.clip_stochastic},
          {"eps_stab", c.eps_stab},
          {"seed", c.seed}};
}

}  // namespace fm4pde
