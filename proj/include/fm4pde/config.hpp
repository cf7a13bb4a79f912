#pragma once

#include "fm4pde/common.hpp"
#include "fm4pde/dataset.hpp"
#include "fm4pde/field_io.hpp"
#include "fm4pde/grf.hpp"
#include "fm4pde/network.hpp"
#include "fm4pde/reconstruction.hpp"
#include "fm4pde/samplers.hpp"
#include "fm4pde/training.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace fm4pde {

struct ProblemSection {
  PDEProblem problem = PDEProblem::poisson(32);
  GRFParams grf;
  std::size_t train_count = 2000;
  std::size_t test_count = 20;
  std::uint64_t seed = 0;
};

struct TrainingSection {
  TrainConfig train;
  int time_features = 16;
  std::vector<int> hidden{256, 256, 256};
  double skip_std = 0.0;
};

struct SamplingSection {
  SamplerMode mode = SamplerMode::Hybrid;
  PhaseOrder order = PhaseOrder::DetThenStoch;
  GridSpec grid;
  GuidanceConfig guidance;
  bool adaptive_zeta = true;
  bool unguided_first_step = false;
  bool endpoint_gradient_only = false;
  bool clip_stochastic = false;
  double eps_stab = 1e-3;
  Task task = Task::Forward;
  std::size_t n_obs = 500;
  std::size_t samples = 20;
  bool unguided_baseline = false;
  std::uint64_t seed = 0;

  SamplerConfig sampler_config() const {
    SamplerConfig c;
    c.mode = mode;
    c.order = order;
    c.grid = make_grid(mode, order, grid);
    c.guidance = guidance;
    c.adaptive_zeta = adaptive_zeta;
    c.unguided_first_step = unguided_first_step;
    c.endpoint_gradient_only = endpoint_gradient_only;
    c.clip_stochastic = clip_stochastic;
    c.eps_stab = eps_stab;
    c.seed = seed;
    return c;
  }
};

/// Data and model default to subpaths of output_dir.
struct PathsSection {
  std::filesystem::path data_dir = "out/data";
  std::filesystem::path model_path = "out/model.fm4w";
  std::filesystem::path output_dir = "out";
};

/// The run configuration: a JSON document with sections problem, training,
/// sampling, verify and paths. The raw document is kept so that the verify
/// section can be read lazily by the checks that need it.
struct RunConfig {
  nlohmann::json raw;
  ProblemSection problem;
  TrainingSection training;
  SamplingSection sampling;
  PathsSection paths;

  const nlohmann::json& verify() const {
    static const nlohmann::json empty = nlohmann::json::object();
    return raw.contains("verify") ? raw.at("verify") : empty;
  }
};

namespace detail {

/// Reads `key` from `j` with a typed default; type errors name the dotted path.
template <typename T>
T field(const nlohmann::json& j, const std::string& section, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(section + "." + key + ": wrong type");
  }
}

inline const nlohmann::json& section(const nlohmann::json& root, const std::string& name) {
  static const nlohmann::json empty = nlohmann::json::object();
  if (!root.contains(name)) return empty;
  if (!root.at(name).is_object()) throw ConfigError(name + ": must be an object");
  return root.at(name);
}

inline PDEProblem parse_problem(const nlohmann::json& p) {
  const std::string kind_name = field<std::string>(p, "problem", "kind", "poisson");
  PdeKind kind;
  try {
    kind = pde_kind_from_string(kind_name);
  } catch (const ConfigError&) {
    throw ConfigError("problem.kind: unknown PDE kind '" + kind_name + "'");
  }
  const int nx = field<int>(p, "problem", "nx", kind == PdeKind::Burgers ? 128 : 32);
  try {
    switch (kind) {
      case PdeKind::Poisson: return PDEProblem::poisson(nx);
      case PdeKind::Helmholtz: return PDEProblem::helmholtz(nx, field<double>(p, "problem", "k", 1.0));
      case PdeKind::Darcy: return PDEProblem::darcy(nx, field<double>(p, "problem", "q", 1.0));
      case PdeKind::Burgers:
        return PDEProblem::burgers(nx, field<int>(p, "problem", "nt", 128), field<double>(p, "problem", "nu", 0.01),
                                   field<double>(p, "problem", "horizon", 1.0));
    }
  } catch (const DomainError& e) {
    throw ConfigError(std::string("problem: ") + e.what());
  }
  throw ConfigError("problem.kind: unreachable");
}

}  // namespace detail

/// Sets the leaf at a dotted path ("sampling.mode") to `value`, parsed as
/// JSON when possible and kept as a string otherwise.
inline void apply_override(nlohmann::json& root, const std::string& dotted, const std::string& value) {
  if (dotted.empty()) throw ConfigError("override: empty path");
  nlohmann::json* node = &root;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override: malformed path '" + dotted + "'");
    if (node->is_null()) *node = nlohmann::json::object();
    if (!node->is_object()) throw ConfigError("override: '" + dotted + "' descends into a non-object");
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
  *node = parsed.is_discarded() ? nlohmann::json(value) : parsed;
}

inline RunConfig parse_run_config(const nlohmann::json& root) {
  if (!root.is_object()) throw ConfigError("config: top level must be an object");
  using detail::field;
  RunConfig cfg;
  cfg.raw = root;

  const auto& p = detail::section(root, "problem");
  cfg.problem.problem = detail::parse_problem(p);
  if (p.contains("grf")) {
    try {
      cfg.problem.grf = GRFParams::from_json(p.at("grf"));
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("problem.grf: malformed");
    }
  }
  cfg.problem.train_count = field<std::size_t>(p, "problem", "train_count", cfg.problem.train_count);
  cfg.problem.test_count = field<std::size_t>(p, "problem", "test_count", cfg.problem.test_count);
  if (!p.contains("seed")) throw ConfigError("problem.seed: required");
  cfg.problem.seed = field<std::uint64_t>(p, "problem", "seed", 0);

  const auto& t = detail::section(root, "training");
  try {
    cfg.training.train = TrainConfig::from_json(t);
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("training: malformed");
  } catch (const DomainError& e) {
    throw ConfigError(std::string("training: ") + e.what());
  }
  if (!t.contains("seed")) cfg.training.train.seed = cfg.problem.seed;
  cfg.training.time_features = field<int>(t, "training", "time_features", cfg.training.time_features);
  cfg.training.hidden = field<std::vector<int>>(t, "training", "hidden", cfg.training.hidden);
  cfg.training.skip_std = field<double>(t, "training", "skip_std", cfg.training.skip_std);
  if (!(cfg.training.skip_std >= 0.0)) throw ConfigError("training.skip_std: must be >= 0");

  const auto& s = detail::section(root, "sampling");
  auto& sm = cfg.sampling;
  sm.mode = sampler_mode_from_string(field<std::string>(s, "sampling", "mode", to_string(sm.mode)));
  const std::string order = field<std::string>(s, "sampling", "order", "det_then_stoch");
  if (order == "det_then_stoch") {
    sm.order = PhaseOrder::DetThenStoch;
  } else if (order == "stoch_then_det") {
    sm.order = PhaseOrder::StochThenDet;
  } else {
    throw ConfigError("sampling.order: expected det_then_stoch or stoch_then_det");
  }
  if (s.contains("grid")) sm.grid = GridSpec::from_json(s.at("grid"));
  if (s.contains("guidance")) {
    const auto& g = s.at("guidance");
    sm.guidance.zeta_obs = field<double>(g, "sampling.guidance", "zeta_obs", sm.guidance.zeta_obs);
    sm.guidance.zeta_pde = field<double>(g, "sampling.guidance", "zeta_pde", sm.guidance.zeta_pde);
    sm.guidance.c_zeta = field<double>(g, "sampling.guidance", "c_zeta", sm.guidance.c_zeta);
    sm.guidance.clip_norm = field<double>(g, "sampling.guidance", "clip_norm", sm.guidance.clip_norm);
  }
  sm.adaptive_zeta = field<bool>(s, "sampling", "adaptive_zeta", sm.adaptive_zeta);
  sm.unguided_first_step = field<bool>(s, "sampling", "unguided_first_step", sm.unguided_first_step);
  sm.endpoint_gradient_only = field<bool>(s, "sampling", "endpoint_gradient_only", sm.endpoint_gradient_only);
  sm.clip_stochastic = field<bool>(s, "sampling", "clip_stochastic", sm.clip_stochastic);
  sm.eps_stab = field<double>(s, "sampling", "eps_stab", sm.eps_stab);
  sm.task = task_from_string(field<std::string>(s, "sampling", "task", to_string(sm.task)));
  sm.n_obs = field<std::size_t>(s, "sampling", "n_obs", sm.n_obs);
  sm.samples = field<std::size_t>(s, "sampling", "samples", sm.samples);
  sm.unguided_baseline = field<bool>(s, "sampling", "unguided_baseline", sm.unguided_baseline);
  sm.seed = field<std::uint64_t>(s, "sampling", "seed", cfg.problem.seed);
  try {
    (void)sm.sampler_config();
  } catch (const DomainError& e) {
    throw ConfigError(std::string("sampling.grid: ") + e.what());
  }

  const auto& paths = detail::section(root, "paths");
  cfg.paths.output_dir = field<std::string>(paths, "paths", "output_dir", cfg.paths.output_dir.string());
  cfg.paths.data_dir = field<std::string>(paths, "paths", "data_dir", (cfg.paths.output_dir / "data").string());
  cfg.paths.model_path =
      field<std::string>(paths, "paths", "model_path", (cfg.paths.output_dir / "model.fm4w").string());
  return cfg;
}

/// Loads a config file, applies dotted overrides, and resolves relative
/// paths against the config file's directory.
inline RunConfig load_run_config(const std::filesystem::path& path,
                                 const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  nlohmann::json root = nlohmann::json::parse(read_bytes(path), nullptr, false);
  if (root.is_discarded()) throw ConfigError("config file is not valid JSON: " + path.string());
  for (const auto& [k, v] : overrides) apply_override(root, k, v);
  RunConfig cfg = parse_run_config(root);
  const auto base = std::filesystem::absolute(path).parent_path();
  for (auto* p : {&cfg.paths.data_dir, &cfg.paths.model_path, &cfg.paths.output_dir}) {
    if (p->is_relative()) *p = base / *p;
  }
  return cfg;
}

}  // namespace fm4pde
