#pragma once

#include "fm4pde/common.hpp"
#include "fm4pde/guidance.hpp"
#include "fm4pde/normalization.hpp"
#include "fm4pde/pde.hpp"
#include "fm4pde/samplers.hpp"
#include "fm4pde/velocity.hpp"

#include <json.hpp>

#include <limits>
#include <string>

namespace fm4pde {

/// forward: observe the coefficient channel; inverse: observe the solution
/// channel; joint: observe points drawn from both.
enum class Task { Forward, Inverse, Joint };

inline std::string to_string(Task t) {
  switch (t) {
    case Task::Forward: return "forward";
    case Task::Inverse: return "inverse";
    case Task::Joint: return "joint";
  }
  return "unknown";
}

inline Task task_from_string(const std::string& s) {
  if (s == "forward") return Task::Forward;
  if (s == "inverse") return Task::Inverse;
  if (s == "joint") return Task::Joint;
  throw ConfigError("sampling.task: unknown task '" + s + "'");
}

inline ChannelMask observed_channels(Task t) {
  switch (t) {
    case Task::Forward: return ChannelMask::Coefficient;
    case Task::Inverse: return ChannelMask::Solution;
    case Task::Joint: return ChannelMask::Both;
  }
  return ChannelMask::Both;
}

/// Per-sample reconstruction metrics, all in physical units. Observation
/// MSEs are NaN for a channel without observations.
struct ReconstructionMetrics {
  double rel_err_coef = 0.0;
  double rel_err_sol = 0.0;
  double obs_mse_coef = std::numeric_limits<double>::quiet_NaN();
  double obs_mse_sol = std::numeric_limits<double>::quiet_NaN();
  double pde_loss = 0.0;
  double final_obs_loss = 0.0;  // normalized observation loss on the returned sample
  bool any_clipped = false;

  nlohmann::json to_json() const {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    return {{"rel_err_coef", rel_err_coef}, {"rel_err_sol", rel_err_sol}, {"obs_mse_coef", num(obs_mse_coef)},
            {"obs_mse_sol", num(obs_mse_sol)}, {"pde_loss", pde_loss},  {"final_obs_loss", final_obs_loss},
            {"any_clipped", any_clipped}};
  }
};

struct Reconstruction {
  Vector prediction;  // physical units
  SampleTrace trace;
  ReconstructionMetrics metrics;
};

inline ReconstructionMetrics score(const PDEProblem& problem, const Vector& prediction, const Vector& truth,
                                   const ObservationSet& obs) {
  ReconstructionMetrics m;
  const auto c = problem.coefficient_range();
  const auto s = problem.solution_range();
  m.rel_err_coef = relative_error(prediction.segment(c.begin, c.size()), truth.segment(c.begin, c.size()));
  m.rel_err_sol = relative_error(prediction.segment(s.begin, s.size()), truth.segment(s.begin, s.size()));
  double sum_c = 0.0, sum_s = 0.0;
  std::size_t n_c = 0, n_s = 0;
  for (std::size_t j = 0; j < obs.size(); ++j) {
    const double r = prediction[obs.indices[j]] - obs.values[j];
    if (c.contains(obs.indices[j])) {
      sum_c += r * r;
      ++n_c;
    } else {
      sum_s += r * r;
      ++n_s;
    }
  }
  if (n_c > 0) m.obs_mse_coef = sum_c / static_cast<double>(n_c);
  if (n_s > 0) m.obs_mse_sol = sum_s / static_cast<double>(n_s);
  m.pde_loss = pde_loss(prediction, problem);
  return m;
}

/// Observations for test sample `index`, drawn from stream (seed, index) so
/// that guided and unguided runs see the same points.
inline ObservationSet task_observations(const PDEProblem& problem, const Vector& truth, Task task,
                                        std::size_t n_obs, std::uint64_t seed, std::uint64_t index) {
  Rng rng = make_rng(seed, 0x6f62730000000000ull + index);
  return sample_observations(problem, truth, n_obs, observed_channels(task), rng);
}

/// Guided reconstruction of one field. The sampler runs in normalized
/// coordinates; the returned prediction is mapped back to physical units.
inline Reconstruction reconstruct(const VelocityModel& model, const PDEProblem& problem, const Normalizer& normalizer,
                                  const Vector& truth, const ObservationSet& obs, const SamplerConfig& cfg,
                                  std::uint64_t trajectory) {
  require_dim(truth, problem.dim(), "reconstruct truth");
  if (model.dim() != problem.dim()) throw ConfigError("reconstruct: model dimension does not match problem layout");
  const FieldObjective objective(problem, obs, cfg.guidance, normalizer);
  Reconstruction r;
  r.trace = sample(model, objective, cfg, trajectory);
  r.prediction = normalizer.to_physical(r.trace.final_prediction);
  r.metrics = score(problem, r.prediction, truth, obs);
  r.metrics.final_obs_loss = r.trace.final_losses.obs;
  for (const auto& s : r.trace.steps) r.metrics.any_clipped = r.metrics.any_clipped || s.clipped;
  return r;
}

}  // namespace fm4pde
