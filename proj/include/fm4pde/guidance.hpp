#pragma once

#include "fm4pde/common.hpp"
#include "fm4pde/normalization.hpp"
#include "fm4pde/pde.hpp"

#include <json.hpp>

#include <algorithm>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace fm4pde {

/// Sparse point observations of a field. Indices are flat, unique and sorted.
struct ObservationSet {
  std::vector<Eigen::Index> indices;
  std::vector<double> values;
  ChannelMask channels = ChannelMask::Both;

  std::size_t size() const { return indices.size(); }

  nlohmann::json to_json() const {
    nlohmann::json ch = nlohmann::json::array();
    if (static_cast<int>(channels) & static_cast<int>(ChannelMask::Coefficient)) ch.push_back("coefficient");
    if (static_cast<int>(channels) & static_cast<int>(ChannelMask::Solution)) ch.push_back("solution");
    return {{"indices", indices}, {"values", values}, {"channels", ch}};
  }

  static ObservationSet from_json(const nlohmann::json& j) {
    ObservationSet obs;
    obs.indices = j.at("indices").get<std::vector<Eigen::Index>>();
    obs.values = j.at("values").get<std::vector<double>>();
    int mask = 0;
    for (const auto& c : j.at("channels")) {
      const auto name = c.get<std::string>();
      if (name == "coefficient") mask |= 1;
      else if (name == "solution") mask |= 2;
      else throw FormatError("ObservationSet: unknown channel '" + name + "'");
    }
    if (mask == 0) throw FormatError("ObservationSet: no channels");
    obs.channels = static_cast<ChannelMask>(mask);
    if (obs.indices.size() != obs.values.size()) throw FormatError("ObservationSet: length mismatch");
    if (!std::is_sorted(obs.indices.begin(), obs.indices.end()) ||
        std::adjacent_find(obs.indices.begin(), obs.indices.end()) != obs.indices.end()) {
      throw FormatError("ObservationSet: indices must be unique and ascending");
    }
    return obs;
  }
};

struct GuidanceConfig {
  double zeta_obs = 1.0;
  double zeta_pde = 0.1;
  double c_zeta = 1.0;
  double clip_norm = 1e3;

  bool enabled() const { return zeta_obs > 0.0 || zeta_pde > 0.0; }
};

/// n distinct indices drawn uniformly from the masked range, values read from x.
inline ObservationSet sample_observations(const PDEProblem& problem, const Vector& x, std::size_t n,
                                          ChannelMask mask, Rng& rng) {
  require_dim(x, problem.dim(), "sample_observations field");
  if (n == 0) throw DomainError("sample_observations: need at least one observation");
  std::vector<Eigen::Index> eligible;
  if (mask == ChannelMask::Both) {
    eligible.resize(static_cast<std::size_t>(problem.dim()));
    std::iota(eligible.begin(), eligible.end(), Eigen::Index{0});
  } else {
    const auto r = problem.range(mask);
    eligible.resize(static_cast<std::size_t>(r.size()));
    std::iota(eligible.begin(), eligible.end(), r.begin);
  }
  if (n > eligible.size()) {
    throw DomainError("sample_observations: requested " + std::to_string(n) + " of " +
                      std::to_string(eligible.size()) + " eligible points");
  }
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, eligible.size() - 1);
    std::swap(eligible[i], eligible[pick(rng)]);
  }
  eligible.resize(n);
  std::sort(eligible.begin(), eligible.end());
  ObservationSet obs;
  obs.channels = mask;
  obs.indices = std::move(eligible);
  obs.values.reserve(n);
  for (auto i : obs.indices) obs.values.push_back(x[i]);
  return obs;
}

namespace detail {
inline void check_observations(const Vector& x, const ObservationSet& obs) {
  if (obs.size() == 0) throw DomainError("observation loss: empty observation set");
  if (obs.values.size() != obs.indices.size()) throw ContractError("observation set: length mismatch");
  for (auto i : obs.indices) {
    if (i < 0 || i >= x.size()) throw ContractError("observation index out of range");
  }
}
}  // namespace detail

/// (1/n) sum_j (x[o_j] - v_j)^2
inline double observation_loss(const Vector& x, const ObservationSet& obs) {
  detail::check_observations(x, obs);
  double sum = 0.0;
  for (std::size_t j = 0; j < obs.size(); ++j) {
    const double r = x[obs.indices[j]] - obs.values[j];
    sum += r * r;
  }
  return sum / static_cast<double>(obs.size());
}

inline Vector observation_loss_grad(const Vector& x, const ObservationSet& obs) {
  detail::check_observations(x, obs);
  Vector g = Vector::Zero(x.size());
  const double scale = 2.0 / static_cast<double>(obs.size());
  for (std::size_t j = 0; j < obs.size(); ++j) {
    g[obs.indices[j]] += scale * (x[obs.indices[j]] - obs.values[j]);
  }
  return g;
}

/// (1/m) ||f(x)||^2 over the residual points.
inline double pde_loss(const Vector& x, const PDEProblem& problem) {
  return residual(problem, x).squaredNorm() / static_cast<double>(problem.residual_points());
}

inline Vector pde_loss_grad(const Vector& x, const PDEProblem& problem) {
  const Vector f = residual(problem, x);
  return residual_vjp(problem, x, f) * (2.0 / static_cast<double>(problem.residual_points()));
}

/// zeta_obs grad L_obs + zeta_pde grad L_pde; a term with zero weight is skipped.
inline Vector composite_gradient(const Vector& x, const ObservationSet& obs, const PDEProblem& problem,
                                 const GuidanceConfig& cfg) {
  Vector g = Vector::Zero(x.size());
  if (cfg.zeta_obs != 0.0) g += cfg.zeta_obs * observation_loss_grad(x, obs);
  if (cfg.zeta_pde != 0.0) g += cfg.zeta_pde * pde_loss_grad(x, problem);
  return g;
}

struct ClipResult {
  Vector gradient;
  double norm;
  bool clipped;
};

inline ClipResult clip_gradient_report(const Vector& g, double max_norm) {
  if (!(max_norm > 0.0)) throw DomainError("clip_gradient: threshold must be positive");
  const double norm = g.norm();
  if (norm <= max_norm) return {g, norm, false};
  return {g * (max_norm / norm), norm, true};
}

/// g * min(1, G_c / ||g||)
inline Vector clip_gradient(const Vector& g, double max_norm) {
  return clip_gradient_report(g, max_norm).gradient;
}

/// zeta_k = c_zeta * delta_k
inline double adaptive_zeta(double c_zeta, double delta_k) { return c_zeta * delta_k; }

struct LossParts {
  double obs = 0.0;
  double pde = 0.0;
};

/// The guidance loss seen by the samplers, L = zeta_obs L_obs + zeta_pde L_pde,
/// expressed on the sampler's state.
class GuidanceObjective {
 public:
  virtual ~GuidanceObjective() = default;
  /// Unweighted loss components, for traces.
  virtual LossParts losses(const Vector& state) const = 0;
  /// Gradient of the weighted loss with respect to the state.
  virtual Vector gradient(const Vector& state) const = 0;
  virtual bool active() const = 0;
};

class NoGuidance final : public GuidanceObjective {
 public:
  LossParts losses(const Vector&) const override { return {}; }
  Vector gradient(const Vector& state) const override { return Vector::Zero(state.size()); }
  bool active() const override { return false; }
};

/// L(x) = weight * ||x||^2 / 2. The exactly solvable loss of the theory harness
/// (PL constant 1, smoothness 1); reported in the obs slot of traces.
class QuadraticObjective final : public GuidanceObjective {
 public:
  explicit QuadraticObjective(double weight = 1.0) : weight_(weight) {}
  LossParts losses(const Vector& state) const override { return {0.5 * state.squaredNorm(), 0.0}; }
  Vector gradient(const Vector& state) const override { return weight_ * state; }
  bool active() const override { return weight_ != 0.0; }

 private:
  double weight_;
};

/// Observation + residual guidance for a field problem.
///
/// The sampler state lives in normalized units. The observation term compares
/// normalized values; the residual is evaluated on the physical field and its
/// gradient is pulled back through the normalizer.
class FieldObjective final : public GuidanceObjective {
 public:
  FieldObjective(PDEProblem problem, ObservationSet obs, GuidanceConfig cfg, Normalizer normalizer = {})
      : problem_(std::move(problem)), cfg_(cfg), normalizer_(std::move(normalizer)) {
    normalized_obs_ = obs;
    for (std::size_t j = 0; j < obs.size(); ++j) {
      normalized_obs_.values[j] = normalizer_.to_normalized(obs.indices[j], obs.values[j]);
    }
  }

  LossParts losses(const Vector& z) const override {
    LossParts parts;
    if (normalized_obs_.size() > 0) parts.obs = observation_loss(z, normalized_obs_);
    parts.pde = pde_loss(normalizer_.to_physical(z), problem_);
    return parts;
  }

  Vector gradient(const Vector& z) const override {
    Vector g = Vector::Zero(z.size());
    if (cfg_.zeta_obs != 0.0 && normalized_obs_.size() > 0) {
      g += cfg_.zeta_obs * observation_loss_grad(z, normalized_obs_);
    }
    if (cfg_.zeta_pde != 0.0) {
      Vector gp = pde_loss_grad(normalizer_.to_physical(z), problem_);
      if (!normalizer_.empty()) gp = gp.cwiseProduct(normalizer_.scale());
      g += cfg_.zeta_pde * gp;
    }
    return g;
  }

  bool active() const override {
    return (cfg_.zeta_obs != 0.0 && normalized_obs_.size() > 0) || cfg_.zeta_pde != 0.0;
  }

  const PDEProblem& problem() const { return problem_; }
  const GuidanceConfig& config() const { return cfg_; }

 private:
  PDEProblem problem_;
  ObservationSet normalized_obs_;
  GuidanceConfig cfg_;
  Normalizer normalizer_;
};

}  // namespace fm4pde
