#pragma once

#include "fm4pde/common.hpp"

#include <memory>
#include <string>

namespace fm4pde {

/// A velocity field u_t(x) on R^d together with its vector-Jacobian product.
///
/// Implementations are immutable once built, so a single instance may be
/// shared across sampling threads.
class VelocityModel {
 public:
  virtual ~VelocityModel() = default;

  virtual Eigen::Index dim() const = 0;
  virtual std::string name() const = 0;

  /// u_t(x). Callers go through fm4pde::evaluate, which checks the contract.
  virtual Vector velocity(double t, const Vector& x) const = 0;

  /// (d u_t / d x)^T v, exact.
  virtual Vector velocity_vjp(double t, const Vector& x, const Vector& v) const = 0;
};

namespace detail {
inline void check_call(const VelocityModel& model, double t, const Vector& x) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("velocity: time outside [0, 1]");
  require_dim(x, model.dim(), "velocity state");
}
}  // namespace detail

inline Vector evaluate(const VelocityModel& model, double t, const Vector& x) {
  detail::check_call(model, t, x);
  return model.velocity(t, x);
}

/// Phi_t(x) = x + (1 - t) u_t(x), the one-shot estimate of the terminal sample.
inline Vector endpoint_prediction(const VelocityModel& model, double t, const Vector& x) {
  detail::check_call(model, t, x);
  if (t == 1.0) return x;
  return x + (1.0 - t) * model.velocity(t, x);
}

/// J_t(x)^T v with J_t = I + (1 - t) grad u_t(x).
inline Vector vjp_endpoint(const VelocityModel& model, double t, const Vector& x,
                           const Vector& cotangent) {
  detail::check_call(model, t, x);
  require_dim(cotangent, model.dim(), "vjp_endpoint cotangent");
  if (t == 1.0) return cotangent;
  return cotangent + (1.0 - t) * model.velocity_vjp(t, x, cotangent);
}

/// (I + dt grad u_t(x))^T v, the Jacobian of one explicit Euler step.
inline Vector vjp_euler(const VelocityModel& model, double t, double dt, const Vector& x,
                        const Vector& cotangent) {
  detail::check_call(model, t, x);
  require_dim(cotangent, model.dim(), "vjp_euler cotangent");
  if (!(dt > 0.0)) throw DomainError("vjp_euler: dt must be positive");
  return cotangent + dt * model.velocity_vjp(t, x, cotangent);
}

/// u_t(x) = -x. Exactly solvable: Phi_t(x) = t x and J_t = t I.
class LinearOU final : public VelocityModel {
 public:
  explicit LinearOU(Eigen::Index dim) : dim_(dim) {
    if (dim < 1) throw DomainError("LinearOU: dim must be positive");
  }
  Eigen::Index dim() const override { return dim_; }
  std::string name() const override { return "linear_ou"; }
  Vector velocity(double, const Vector& x) const override { return -x; }
  Vector velocity_vjp(double, const Vector&, const Vector& v) const override { return -v; }

 private:
  Eigen::Index dim_;
};

/// Exact marginal velocity of the linear path from N(0, I) to N(m, s^2 I):
///   u_t(x) = c(t) (x - t m) + m,  c(t) = (t s^2 - (1 - t)) / (t^2 s^2 + (1 - t)^2).
class GaussianFlow final : public VelocityModel {
 public:
  GaussianFlow(Vector target_mean, double target_std)
      : mean_(std::move(target_mean)), std_(target_std) {
    if (mean_.size() < 1) throw DomainError("GaussianFlow: empty mean");
    if (!(target_std > 0.0)) throw DomainError("GaussianFlow: target_std must be positive");
  }

  Eigen::Index dim() const override { return mean_.size(); }
  std::string name() const override { return "gaussian_flow"; }

  double gain(double t) const {
    const double s2 = std_ * std_;
    const double r = 1.0 - t;
    return (t * s2 - r) / (t * t * s2 + r * r);
  }

  Vector velocity(double t, const Vector& x) const override {
    return gain(t) * (x - t * mean_) + mean_;
  }
  Vector velocity_vjp(double t, const Vector&, const Vector& v) const override {
    return gain(t) * v;
  }

  const Vector& target_mean() const { return mean_; }
  double target_std() const { return std_; }

 private:
  Vector mean_;
  double std_;
};

}  // namespace fm4pde
