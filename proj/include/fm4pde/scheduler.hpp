#pragma once

#include "fm4pde/common.hpp"

#include <json.hpp>

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

namespace fm4pde {

struct SchedulerValues {
  double alpha;
  double sigma;
  double alpha_dot;
  double sigma_dot;
};

struct GuidanceCoefficients {
  double a;
  double b;
};

/// Affine conditional path x_t = alpha_t x_1 + sigma_t x_0.
///
/// Only the linear (rectified) path is provided. The guidance coefficients
/// a_t, b_t come from rewriting the conditional velocity in score form; both
/// carry eps_stab in the denominator so they stay finite at t = 0.
class Scheduler {
 public:
  enum class Kind { Linear };

  explicit Scheduler(double eps_stab = 1e-3, Kind kind = Kind::Linear)
      : kind_(kind), eps_stab_(eps_stab) {
    if (!(eps_stab >= 0.0)) throw DomainError("Scheduler: eps_stab must be nonnegative");
  }

  Kind kind() const { return kind_; }
  double eps_stab() const { return eps_stab_; }

  SchedulerValues eval(double t) const {
    check_time(t);
    return {t, 1.0 - t, 1.0, -1.0};
  }

  GuidanceCoefficients guidance_coefficients(double t) const {
    const auto s = eval(t);
    const double denom = s.alpha + eps_stab_;
    if (denom <= 0.0) {
      throw DomainError("Scheduler: guidance coefficients are singular at t = 0 without eps_stab");
    }
    const double a = s.alpha_dot / denom;
    const double b = -(s.sigma_dot * s.sigma * s.alpha - s.alpha_dot * s.sigma * s.sigma) / denom;
    return {a, b};
  }

  double b(double t) const { return guidance_coefficients(t).b; }

 private:
  static void check_time(double t) {
    if (!(t >= 0.0 && t <= 1.0)) {
      throw DomainError("Scheduler: time " + std::to_string(t) + " outside [0, 1]");
    }
  }

  Kind kind_;
  double eps_stab_;
};

/// Ordered sampling times. Immutable after construction.
class TimeGrid {
 public:
  enum class Kind { Geometric, Uniform, Hybrid };

  TimeGrid() = default;
  TimeGrid(Kind kind, std::vector<double> times, double delta_min, double t_star, double eta = 0.0)
      : kind_(kind), times_(std::move(times)), delta_min_(delta_min), t_star_(t_star), eta_(eta) {
    if (times_.size() < 2) throw DomainError("TimeGrid: need at least two times");
    for (std::size_t k = 0; k + 1 < times_.size(); ++k) {
      if (!(times_[k + 1] > times_[k])) {
        throw DomainError("TimeGrid: times must be strictly increasing (index " +
                          std::to_string(k + 1) + ")");
      }
    }
    if (times_.front() < 0.0 || times_.back() > 1.0) {
      throw DomainError("TimeGrid: times must lie in [0, 1]");
    }
  }

  Kind kind() const { return kind_; }
  const std::vector<double>& times() const { return times_; }
  double time(std::size_t k) const { return times_.at(k); }
  /// Number of steps N (times has N + 1 entries).
  std::size_t steps() const { return times_.empty() ? 0 : times_.size() - 1; }
  double dt(std::size_t k) const { return times_.at(k + 1) - times_.at(k); }
  double delta(std::size_t k) const { return 1.0 - times_.at(k); }
  double delta_min() const { return delta_min_; }
  double t_star() const { return t_star_; }
  double eta() const { return eta_; }
  double front() const { return times_.front(); }
  double back() const { return times_.back(); }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["kind"] = kind_name(kind_);
    j["times"] = times_;
    j["delta_min"] = delta_min_;
    j["t_star"] = t_star_;
    if (kind_ != Kind::Uniform) j["eta"] = eta_;
    return j;
  }

  static TimeGrid from_json(const nlohmann::json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    Kind k;
    if (kind == "geometric") {
      k = Kind::Geometric;
    } else if (kind == "uniform") {
      k = Kind::Uniform;
    } else if (kind == "hybrid") {
      k = Kind::Hybrid;
    } else {
      throw FormatError("TimeGrid: unknown kind '" + kind + "'");
    }
    return TimeGrid(k, j.at("times").get<std::vector<double>>(), j.at("delta_min").get<double>(),
                    j.at("t_star").get<double>(), j.value("eta", 0.0));
  }

  static std::string kind_name(Kind k) {
    switch (k) {
      case Kind::Geometric: return "geometric";
      case Kind::Uniform: return "uniform";
      case Kind::Hybrid: return "hybrid";
    }
    return "unknown";
  }

 private:
  Kind kind_ = Kind::Uniform;
  std::vector<double> times_;
  double delta_min_ = 0.0;
  double t_star_ = 0.0;
  double eta_ = 0.0;
};

/// t_0 = epsilon, t_{k+1} = (1 + eta) t_k; the first node at or past t_end is
/// clamped to t_end so phase handoffs land exactly on t_end.
inline TimeGrid geometric_grid(double epsilon, double t_end, double eta) {
  if (!(epsilon > 0.0)) throw DomainError("geometric_grid: epsilon must be positive");
  if (!(epsilon < t_end && t_end <= 1.0)) {
    throw DomainError("geometric_grid: need epsilon < t_end <= 1");
  }
  if (!(eta > 0.0)) throw DomainError("geometric_grid: eta must be positive");
  std::vector<double> times{epsilon};
  double t = epsilon;
  while (true) {
    t *= (1.0 + eta);
    // Nodes within round-off of t_end are snapped rather than leaving a sliver step.
    if (t >= t_end * (1.0 - 1e-12)) {
      times.push_back(t_end);
      break;
    }
    times.push_back(t);
  }
  return TimeGrid(TimeGrid::Kind::Geometric, std::move(times), 1.0 - t_end, t_end, eta);
}

/// N + 1 equally spaced times from t0 to 1 - delta_min.
inline TimeGrid uniform_grid(double t0, double delta_min, std::size_t n_steps) {
  if (!(delta_min > 0.0)) throw DomainError("uniform_grid: delta_min must be positive");
  if (n_steps < 1) throw DomainError("uniform_grid: need at least one step");
  const double t_end = 1.0 - delta_min;
  if (!(t0 >= 0.0 && t0 < t_end)) {
    throw DomainError("uniform_grid: need 0 <= t0 < 1 - delta_min");
  }
  std::vector<double> times(n_steps + 1);
  const double span = t_end - t0;
  for (std::size_t k = 0; k <= n_steps; ++k) {
    times[k] = t0 + span * static_cast<double>(k) / static_cast<double>(n_steps);
  }
  times.back() = t_end;
  return TimeGrid(TimeGrid::Kind::Uniform, std::move(times), delta_min, t0);
}

/// Geometric grid on [epsilon, t_star] followed by a uniform grid on
/// [t_star, 1 - delta_min]; t_star appears once.
inline TimeGrid hybrid_grid(double epsilon, double eta, double t_star, double delta_min,
                            std::size_t uniform_steps) {
  const TimeGrid head = geometric_grid(epsilon, t_star, eta);
  const TimeGrid tail = uniform_grid(t_star, delta_min, uniform_steps);
  std::vector<double> times = head.times();
  times.insert(times.end(), tail.times().begin() + 1, tail.times().end());
  return TimeGrid(TimeGrid::Kind::Hybrid, std::move(times), delta_min, t_star, eta);
}

struct GridViolation {
  char clause;  // 'a', 'b' or 'c'
  std::size_t index;
  std::string message;
};

struct ValidationReport {
  std::vector<GridViolation> violations;
  bool ok() const { return violations.empty(); }
  bool violated(char clause) const {
    for (const auto& v : violations)
      if (v.clause == clause) return true;
    return false;
  }
};

/// Checks the stochastic-phase grid conditions: (a) every step is at most
/// epsilon0 / 2, (b) steps with t_k >= 1 - epsilon0 satisfy dt_k <= c_delta
/// * delta_k, (c) the last time leaves a positive noise floor.
inline ValidationReport validate_grid(const TimeGrid& grid, double c_delta, double epsilon0) {
  if (!(c_delta > 0.0 && c_delta <= 0.5)) {
    throw DomainError("validate_grid: c_delta must lie in (0, 1/2]");
  }
  if (!(epsilon0 > 0.0)) throw DomainError("validate_grid: epsilon0 must be positive");
  ValidationReport report;
  for (std::size_t k = 0; k < grid.steps(); ++k) {
    const double dt = grid.dt(k);
    if (dt > epsilon0 / 2.0) {
      report.violations.push_back(
          {'a', k, "step " + std::to_string(dt) + " exceeds epsilon0/2"});
    }
    if (grid.time(k) >= 1.0 - epsilon0 && dt > c_delta * grid.delta(k)) {
      report.violations.push_back(
          {'b', k, "step/delta ratio " + std::to_string(dt / grid.delta(k)) + " exceeds c_delta"});
    }
  }
  const double floor = grid.delta_min();
  if (!(floor > 0.0) || grid.back() > 1.0 - floor + 1e-12) {
    report.violations.push_back({'c', grid.steps(), "no positive noise floor"});
  }
  return report;
}

}  // namespace fm4pde
