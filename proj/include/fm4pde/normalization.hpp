#pragma once

#include "fm4pde/common.hpp"
#include "fm4pde/pde.hpp"

#include <json.hpp>

#include <cmath>

namespace fm4pde {

struct ChannelStats {
  double mean = 0.0;
  double std = 1.0;
};

/// Per-role affine standardization: physical = mean + std * normalized, with
/// separate statistics for the coefficient and solution index ranges.
class Normalizer {
 public:
  Normalizer() = default;

  /// Identity map on a problem's layout.
  explicit Normalizer(const PDEProblem& problem) : Normalizer(problem, {}, {}) {}

  Normalizer(const PDEProblem& problem, ChannelStats coefficient, ChannelStats solution)
      : coefficient_(coefficient), solution_(solution) {
    if (!(coefficient.std > 0.0) || !(solution.std > 0.0)) {
      throw DomainError("Normalizer: standard deviations must be positive");
    }
    shift_ = Vector::Zero(problem.dim());
    scale_ = Vector::Ones(problem.dim());
    const auto c = problem.coefficient_range();
    const auto s = problem.solution_range();
    shift_.segment(c.begin, c.size()).setConstant(coefficient.mean);
    scale_.segment(c.begin, c.size()).setConstant(coefficient.std);
    shift_.segment(s.begin, s.size()).setConstant(solution.mean);
    scale_.segment(s.begin, s.size()).setConstant(solution.std);
  }

  bool empty() const { return scale_.size() == 0; }
  const ChannelStats& coefficient() const { return coefficient_; }
  const ChannelStats& solution() const { return solution_; }

  /// Per-entry scale; the chain rule factor from physical to normalized gradients.
  const Vector& scale() const { return scale_; }

  Vector to_physical(const Vector& z) const {
    if (empty()) return z;
    return shift_ + scale_.cwiseProduct(z);
  }
  Vector to_normalized(const Vector& x) const {
    if (empty()) return x;
    return (x - shift_).cwiseQuotient(scale_);
  }
  double to_normalized(Eigen::Index index, double value) const {
    if (empty()) return value;
    return (value - shift_[index]) / scale_[index];
  }

  nlohmann::json to_json() const {
    return {{"coefficient", {{"mean", coefficient_.mean}, {"std", coefficient_.std}}},
            {"solution", {{"mean", solution_.mean}, {"std", solution_.std}}}};
  }

  static Normalizer from_json(const PDEProblem& problem, const nlohmann::json& j) {
    return Normalizer(problem,
                      {j.at("coefficient").at("mean").get<double>(), j.at("coefficient").at("std").get<double>()},
                      {j.at("solution").at("mean").get<double>(), j.at("solution").at("std").get<double>()});
  }

 private:
  ChannelStats coefficient_;
  ChannelStats solution_;
  Vector shift_;
  Vector scale_;
};

}  // namespace fm4pde
