// fm4pde command-line driver: data generation, training, guided sampling,
// theory verification and reporting from one JSON run config.

#include "fm4pde/config.hpp"
#include "fm4pde/theory.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>

namespace fs = std::filesystem;
using namespace fm4pde;
using nlohmann::json;

namespace {

enum ExitCode { kOk = 0, kCheckFailed = 1, kConfigError = 2, kRuntimeError = 3 };

/// Timestamped lines go to <output_dir>/run.log only; every other output is
/// a pure function of the config and on-disk inputs.
class RunLog {
 public:
  explicit RunLog(const fs::path& dir) {
    fs::create_directories(dir);
    out_.open(dir / "run.log", std::ios::app);
  }
  void line(const std::string& msg) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    out_ << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ") << ' ' << msg << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

Matrix training_matrix(const Dataset& ds) {
  Matrix data(ds.problem.dim(), static_cast<Eigen::Index>(ds.train.size()));
  for (std::size_t j = 0; j < ds.train.size(); ++j) {
    data.col(static_cast<Eigen::Index>(j)) = ds.normalizer.to_normalized(ds.train[j].data);
  }
  return data;
}

NetArchitecture architecture(const RunConfig& cfg) {
  NetArchitecture a;
  a.state_dim = cfg.problem.problem.dim();
  a.time_features = cfg.training.time_features;
  a.hidden = cfg.training.hidden;
  a.skip_std = cfg.training.skip_std;
  return a;
}

Dataset require_dataset(const RunConfig& cfg, bool with_train) {
  Dataset ds = load_dataset(cfg.paths.data_dir, with_train);
  if (ds.problem.dim() != cfg.problem.problem.dim() || ds.problem.kind() != cfg.problem.problem.kind()) {
    throw ConfigError("dataset in " + cfg.paths.data_dir.string() + " does not match problem section");
  }
  if (ds.test.empty()) throw ConfigError("dataset has no test split");
  return ds;
}

std::shared_ptr<const VelocityNet> require_model(const RunConfig& cfg) {
  if (!fs::exists(cfg.paths.model_path)) throw ConfigError("model file not found: " + cfg.paths.model_path.string());
  return std::make_shared<const VelocityNet>(load_weights(cfg.paths.model_path, cfg.problem.problem.dim()));
}

// ---------------------------------------------------------------- commands

int cmd_gen_data(const RunConfig& cfg, RunLog& log) {
  const auto& p = cfg.problem;
  log.line("gen-data: " + to_string(p.problem.kind()) + " train=" + std::to_string(p.train_count) +
           " test=" + std::to_string(p.test_count));
  const Dataset ds = build_dataset(p.problem, p.grf, p.train_count, p.test_count, p.seed);
  const auto hash = save_dataset(ds, cfg.paths.data_dir);
  std::cout << "dataset written to " << cfg.paths.data_dir.string() << "\n";
  std::cout << "dataset hash " << hex64(hash) << "\n";
  log.line("gen-data: hash " + hex64(hash));
  return kOk;
}

int cmd_train(const RunConfig& cfg, RunLog& log, bool resume) {
  const Dataset ds = require_dataset(cfg, true);
  const Matrix data = training_matrix(ds);
  const NetArchitecture arch = architecture(cfg);
  std::int64_t start = 0;
  std::unique_ptr<VelocityNet> net;
  if (resume) {
    if (!fs::exists(cfg.paths.model_path)) throw ConfigError("--resume: no weights at " + cfg.paths.model_path.string());
    auto wf = load_weights_file(cfg.paths.model_path, arch.state_dim);
    if (!(wf.net.architecture() == arch)) throw ConfigError("--resume: weight file architecture differs from config");
    net = std::make_unique<VelocityNet>(std::move(wf.net));
    start = wf.steps_completed;
  } else {
    net = std::make_unique<VelocityNet>(arch, cfg.training.train.seed);
  }
  const fs::path trace_path = cfg.paths.output_dir / "train_loss.csv";
  fs::create_directories(cfg.paths.output_dir);
  const bool append = resume && fs::exists(trace_path);
  std::ofstream trace(trace_path, append ? std::ios::app : std::ios::trunc);
  if (!append) trace << "step,loss\n";
  log.line("train: start step " + std::to_string(start) + ", " + std::to_string(cfg.training.train.steps) + " steps");
  const std::int64_t report_every = std::max<std::int64_t>(1, static_cast<std::int64_t>(cfg.training.train.steps) / 20);
  char buf[64];
  const auto result = train(*net, data, cfg.training.train, start, [&](std::int64_t step, double loss) {
    std::snprintf(buf, sizeof(buf), "%lld,%.17g\n", static_cast<long long>(step), loss);
    trace << buf;
    if ((step - start) % report_every == 0) std::cerr << "step " << step << " loss " << loss << "\n";
  });
  fs::create_directories(cfg.paths.model_path.parent_path());
  save_weights(*net, cfg.paths.model_path, result.steps_completed);
  if (!result.losses.empty()) {
    const std::size_t w = std::min<std::size_t>(100, result.losses.size());
    const auto avg = moving_average(result.losses, w);
    std::cout << "initial loss " << avg[w - 1] << ", final loss " << avg.back() << " (moving average over " << w
              << " steps)\n";
  }
  std::cout << "weights written to " << cfg.paths.model_path.string() << " after " << result.steps_completed
            << " steps\n";
  log.line("train: finished at step " + std::to_string(result.steps_completed));
  return kOk;
}

struct SampleRun {
  std::vector<Reconstruction> recs;
  json summary;
};

SampleRun run_samples(const RunConfig& cfg, const Dataset& ds, const VelocityModel& model, const SamplerConfig& scfg,
                      bool keep_traces) {
  const auto& sm = cfg.sampling;
  SampleRun run;
  run.recs.resize(sm.samples);
  parallel_for(sm.samples, [&](std::size_t i) {
    const Vector& truth = ds.test[i % ds.test.size()].data;
    const auto obs = task_observations(ds.problem, truth, sm.task, sm.n_obs, sm.seed, i);
    run.recs[i] = reconstruct(model, ds.problem, ds.normalizer, truth, obs, scfg, i);
    if (!keep_traces) run.recs[i].trace.steps.clear();
  });
  double coef = 0.0, sol = 0.0;
  std::vector<double> obs_losses, pde_losses;
  json per_sample = json::array();
  for (const auto& r : run.recs) {
    coef += r.metrics.rel_err_coef;
    sol += r.metrics.rel_err_sol;
    obs_losses.push_back(r.metrics.final_obs_loss);
    pde_losses.push_back(r.metrics.pde_loss);
    per_sample.push_back(r.metrics.to_json());
  }
  const double n = static_cast<double>(run.recs.size());
  run.summary = {{"mean_rel_err_coef", coef / n},
                 {"mean_rel_err_sol", sol / n},
                 {"median_final_obs_loss", MixRow::median(obs_losses)},
                 {"median_pde_loss", MixRow::median(pde_losses)},
                 {"samples", per_sample}};
  return run;
}

int cmd_sample(const RunConfig& cfg, RunLog& log, bool unguided_baseline) {
  const Dataset ds = require_dataset(cfg, false);
  const TrainedVelocity model(require_model(cfg));
  const SamplerConfig scfg = cfg.sampling.sampler_config();
  const auto& sm = cfg.sampling;
  if (sm.samples < 1) throw ConfigError("sampling.samples: must be positive");
  log.line("sample: " + to_string(sm.mode) + ", " + std::to_string(sm.samples) + " samples");
  SampleRun guided = run_samples(cfg, ds, model, scfg, true);
  const fs::path dir = cfg.paths.output_dir / "samples";
  fs::create_directories(dir);
  for (std::size_t i = 0; i < guided.recs.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%06zu", i);
    write_field(dir / (std::string(name) + ".fm4"), make_field(ds.problem, guided.recs[i].prediction));
    std::ostringstream csv;
    guided.recs[i].trace.write_csv(csv);
    write_text(dir / (std::string(name) + "_trace.csv"), csv.str());
  }
  json metrics{{"task", to_string(sm.task)},
               {"n_obs", sm.n_obs},
               {"sampler", sampler_config_to_json(scfg)},
               {"guided", guided.summary}};
  std::cout << "mean relative error: coefficient " << guided.summary["mean_rel_err_coef"].get<double>()
            << ", solution " << guided.summary["mean_rel_err_sol"].get<double>() << "\n";
  if (unguided_baseline || sm.unguided_baseline) {
    SamplerConfig plain = scfg;
    plain.guidance.zeta_obs = 0.0;
    plain.guidance.zeta_pde = 0.0;
    const SampleRun base = run_samples(cfg, ds, model, plain, false);
    metrics["unguided"] = base.summary;
    const double ratio = base.summary["median_final_obs_loss"].get<double>() /
                         guided.summary["median_final_obs_loss"].get<double>();
    metrics["obs_loss_improvement"] = ratio;
    std::cout << "unguided mean relative error: solution " << base.summary["mean_rel_err_sol"].get<double>()
              << "; median observation loss improvement " << ratio << "x\n";
  }
  write_text(cfg.paths.output_dir / "metrics.json", metrics.dump(2) + "\n");
  log.line("sample: wrote metrics.json");
  return kOk;
}

template <typename T>
T knob(const json& section, const char* key, T fallback) {
  if (!section.contains(key)) return fallback;
  try {
    return section.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("verify.") + key + ": wrong type");
  }
}

const json& verify_section(const RunConfig& cfg, const char* name) {
  static const json empty = json::object();
  const json& v = cfg.verify();
  return v.contains(name) ? v.at(name) : empty;
}

VerificationReport verify_lower_bound_cmd(const RunConfig& cfg) {
  const json& s = verify_section(cfg, "lower_bound");
  std::vector<std::pair<double, double>> params;
  for (double d : knob<std::vector<double>>(s, "delta_min", {0.05, 0.1, 0.2})) {
    for (double f : knob<std::vector<double>>(s, "zeta_fraction", {0.25, 0.5})) params.emplace_back(d, f * d);
  }
  return verify_lower_bound(params, knob<std::size_t>(s, "trials", 1000000), knob<std::uint64_t>(s, "seed", 1));
}

VerificationReport verify_contraction_cmd(const RunConfig& cfg) {
  const json& s = verify_section(cfg, "contraction");
  ContractionConfig cc;
  cc.eta = knob(s, "eta", cc.eta);
  cc.t_end = knob(s, "t_end", cc.t_end);
  cc.dim = knob<Eigen::Index>(s, "dim", cc.dim);
  cc.x0 = knob(s, "x0", cc.x0);
  cc.floor = knob(s, "floor", cc.floor);
  return verify_det_contraction(knob<std::vector<double>>(s, "epsilon", {1e-2, 1e-3, 1e-4}), cc).report;
}

VerificationReport verify_moments_cmd(const RunConfig& cfg) {
  const json& s = verify_section(cfg, "moments");
  MomentConfig mc;
  mc.dim = knob<Eigen::Index>(s, "dim", mc.dim);
  mc.trials = knob(s, "trials", mc.trials);
  mc.uniform_steps = knob(s, "uniform_steps", mc.uniform_steps);
  mc.c_zeta = knob(s, "c_zeta", mc.c_zeta);
  mc.c_delta = knob(s, "c_delta", mc.c_delta);
  mc.epsilon0 = knob(s, "epsilon0", mc.epsilon0);
  mc.spread_tolerance = knob(s, "spread_tolerance", mc.spread_tolerance);
  mc.seed = knob(s, "seed", mc.seed);
  return verify_moment_bounds(knob<std::vector<double>>(s, "delta_min", {0.2, 0.1, 0.05, 0.02}), mc).report;
}

VerificationReport verify_scaling_cmd(const RunConfig& cfg) {
  const json& s = verify_section(cfg, "scaling");
  TheoryInstance inst;
  inst.c_zeta = knob(s, "c_zeta", inst.c_zeta);
  inst.c_delta = knob(s, "c_delta", inst.c_delta);
  inst.eps_start = knob(s, "eps_start", inst.eps_start);
  inst.initial_variance = knob(s, "initial_variance", inst.initial_variance);
  inst.trials = knob<std::size_t>(s, "trials", 200000);
  inst.seed = knob(s, "seed", inst.seed);
  return verify_adaptive_scaling(knob<std::vector<double>>(s, "delta_min", {0.2, 0.1, 0.05}), inst,
                                 knob(s, "tolerance", 0.15))
      .report;
}

VerificationReport verify_mixes_cmd(const RunConfig& cfg) {
  const json& s = verify_section(cfg, "mixes");
  const Dataset ds = require_dataset(cfg, false);
  const TrainedVelocity model(require_model(cfg));
  std::vector<Vector> truths;
  for (const auto& f : ds.test) truths.push_back(f.data);
  const auto& sm = cfg.sampling;
  const MixTable table = compare_sampler_mixes(&model, ds.problem, ds.normalizer, truths, default_mixes(),
                                               knob<std::size_t>(s, "seeds", 10), sm.task, sm.n_obs,
                                               sm.sampler_config(), sm.grid);
  std::ostringstream csv;
  table.write_csv(csv);
  write_text(cfg.paths.output_dir / "sampler_mixes.csv", csv.str());
  std::cout << csv.str();
  return check_mix_ordering(table, knob(s, "slack", 1.1));
}

int cmd_verify(const RunConfig& cfg, RunLog& log, const std::string& which) {
  const std::vector<std::pair<std::string, VerificationReport (*)(const RunConfig&)>> checks{
      {"lower-bound", verify_lower_bound_cmd},
      {"contraction", verify_contraction_cmd},
      {"moments", verify_moments_cmd},
      {"scaling", verify_scaling_cmd},
      {"mixes", verify_mixes_cmd}};
  bool all_pass = true;
  bool matched = false;
  for (const auto& [name, fn] : checks) {
    if (which != "all" && which != name) continue;
    matched = true;
    log.line("verify " + name + ": start");
    const VerificationReport report = fn(cfg);
    std::ostringstream csv, timed;
    report.write_csv(csv, false);
    report.write_csv(timed, true);
    write_text(cfg.paths.output_dir / ("verify_" + name + ".csv"), csv.str());
    write_text(cfg.paths.output_dir / ("verify_" + name + ".json"), report.to_json(false).dump(2) + "\n");
    std::cout << timed.str();
    for (const auto& r : report.records) log.line("verify " + r.name + ": runtime_s " + std::to_string(r.runtime_s));
    log.line("verify " + name + (report.all_pass() ? ": pass" : ": FAIL"));
    all_pass = all_pass && report.all_pass();
  }
  if (!matched) throw ConfigError("verify: unknown check '" + which + "'");
  std::cout << (all_pass ? "all checks passed\n" : "some checks FAILED\n");
  return all_pass ? kOk : kCheckFailed;
}

int cmd_report(const RunConfig& cfg) {
  const fs::path out = cfg.paths.output_dir;
  std::ostringstream md;
  md << "# fm4pde run report\n\n";
  md << "Problem: " << to_string(cfg.problem.problem.kind()) << ", state dimension " << cfg.problem.problem.dim()
     << "\n\n";
  bool any = false;
  if (fs::exists(out / "train_loss.csv")) {
    std::ifstream in(out / "train_loss.csv");
    std::string line, first, last;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (first.empty()) first = line;
      last = line;
    }
    md << "## Training\n\nfirst step,loss: " << first << "\nlast step,loss: " << last << "\n\n";
    any = true;
  }
  if (fs::exists(out / "metrics.json")) {
    const json m = json::parse(read_bytes(out / "metrics.json"));
    md << "## Reconstruction (" << m.at("task").get<std::string>() << ")\n\n";
    md << "| run | mean rel. err. coefficient | mean rel. err. solution | median obs. loss |\n|---|---|---|---|\n";
    for (const char* key : {"guided", "unguided"}) {
      if (!m.contains(key)) continue;
      const auto& s = m.at(key);
      md << "| " << key << " | " << s.at("mean_rel_err_coef").get<double>() << " | "
         << s.at("mean_rel_err_sol").get<double>() << " | " << s.at("median_final_obs_loss").get<double>() << " |\n";
    }
    md << "\n";
    any = true;
  }
  for (const char* name : {"lower-bound", "contraction", "moments", "scaling", "mixes"}) {
    const fs::path p = out / ("verify_" + std::string(name) + ".json");
    if (!fs::exists(p)) continue;
    const json r = json::parse(read_bytes(p));
    md << "## verify " << name << (r.at("all_pass").get<bool>() ? " (pass)" : " (FAIL)") << "\n\n";
    md << "| check | analytic | empirical | pass |\n|---|---|---|---|\n";
    for (const auto& c : r.at("checks")) {
      md << "| " << c.at("name").get<std::string>() << " | " << c.at("analytic").get<double>() << " | "
         << c.at("empirical").get<double>() << " | " << (c.at("pass").get<bool>() ? "yes" : "no") << " |\n";
    }
    md << "\n";
    any = true;
  }
  if (fs::exists(out / "sampler_mixes.csv")) {
    md << "## Sampler mixes\n\n```\n" << read_bytes(out / "sampler_mixes.csv") << "```\n";
    any = true;
  }
  if (!any) throw ConfigError("report: no results found in " + out.string());
  write_text(out / "report.md", md.str());
  std::cout << md.str();
  return kOk;
}

/// Splits "key=value"; also accepts the pair form "--a.b value" left over by
/// the parser.
std::vector<std::pair<std::string, std::string>> collect_overrides(const std::vector<std::string>& sets,
                                                                   std::vector<std::string> extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
    out.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0 || a.find('.') == std::string::npos) throw ConfigError("unexpected argument '" + a + "'");
    const auto eq = a.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(a.substr(2, eq - 2), a.substr(eq + 1));
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("override " + a + " needs a value");
      out.emplace_back(a.substr(2), extras[++i]);
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Guided flow matching for PDE reconstruction"};
  app.require_subcommand(1);
  app.allow_extras();
  std::string config_path;
  std::vector<std::string> sets;
  app.add_option("-c,--config", config_path, "Run config (JSON)")->required();
  app.add_option("--set", sets, "Override a config leaf: dotted.key=value");

  auto* gen = app.add_subcommand("gen-data", "Generate the coefficient/solution dataset");
  auto* tr = app.add_subcommand("train", "Train the velocity network");
  bool resume = false;
  tr->add_flag("--resume", resume, "Continue from the weight file at paths.model_path");
  auto* sa = app.add_subcommand("sample", "Guided reconstruction of the test split");
  bool unguided = false;
  sa->add_flag("--unguided-baseline", unguided, "Also run with guidance disabled and compare");
  auto* ve = app.add_subcommand("verify", "Run theory checks");
  std::string which = "all";
  ve->add_option("check", which, "lower-bound | contraction | moments | scaling | mixes | all")
      ->check(CLI::IsMember({"lower-bound", "contraction", "moments", "scaling", "mixes", "all"}));
  auto* rep = app.add_subcommand("report", "Summarize results in the output directory");
  for (auto* sub : {gen, tr, sa, ve, rep}) sub->allow_extras();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    std::vector<std::string> extras = app.remaining(true);
    const auto overrides = collect_overrides(sets, extras);
    const RunConfig cfg = load_run_config(config_path, overrides);
    RunLog log(cfg.paths.output_dir);
    if (gen->parsed()) return cmd_gen_data(cfg, log);
    if (tr->parsed()) return cmd_train(cfg, log, resume);
    if (sa->parsed()) return cmd_sample(cfg, log, unguided);
    if (ve->parsed()) return cmd_verify(cfg, log, which);
    if (rep->parsed()) return cmd_report(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const DomainError& e) {
    std::cerr << "invalid parameter: " << e.what() << "\n";
    return kConfigError;
  } catch (const ContractError& e) {
    std::cerr << "invalid parameter: " << e.what() << "\n";
    return kConfigError;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kRuntimeError;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kRuntimeError;
  } catch (const SolverError& e) {
    std::cerr << "solver failure: " << e.what() << "\n";
    return kRuntimeError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kRuntimeError;
}
