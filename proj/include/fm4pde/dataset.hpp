#pragma once

#include "fm4pde/common.hpp"
#include "fm4pde/field_io.hpp"
#include "fm4pde/grf.hpp"
#include "fm4pde/normalization.hpp"
#include "fm4pde/parallel.hpp"
#include "fm4pde/pde.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

namespace fm4pde {

enum class Split { Train = 0, Test = 1 };

/// Test fields are drawn with a longer correlation length than training fields.
inline constexpr double kTestLengthScaleFactor = 1.5;

inline GRFParams split_params(const GRFParams& train, Split split) {
  GRFParams p = train;
  if (split == Split::Test) p.length_scale *= kTestLengthScaleFactor;
  return p;
}

/// One paired sample (a, u) for the problem, drawn from its own RNG stream.
inline GridField generate_sample(const PDEProblem& problem, const GRFParams& grf, Rng& rng) {
  Vector x(problem.dim());
  if (problem.is_static()) {
    const int n = problem.nx();
    const Vector a = sample_grf(grf, n, n, rng);
    const Vector u = solve_static(problem, a);
    x << a, u;
  } else {
    const Vector u0 = sample_grf(grf, 1, problem.nx(), rng);
    x = solve_burgers(problem, u0);
  }
  return make_field(problem, std::move(x));
}

inline std::uint64_t sample_stream(Split split, std::size_t index) {
  return (static_cast<std::uint64_t>(split) << 40) | static_cast<std::uint64_t>(index);
}

/// `count` paired samples; generation is parallel but every sample has its
/// own stream, so the result is independent of the worker count.
inline std::vector<GridField> generate_dataset(const PDEProblem& problem, const GRFParams& train_grf,
                                               std::size_t count, std::uint64_t seed, Split split) {
  if (count < 1) throw DomainError("generate_dataset: count must be at least 1");
  const GRFParams grf = split_params(train_grf, split);
  std::vector<GridField> out(count);
  parallel_for(count, [&](std::size_t i) {
    Rng rng = make_rng(seed, sample_stream(split, i));
    try {
      out[i] = generate_sample(problem, grf, rng);
    } catch (const SolverError& e) {
      throw SolverError("sample " + std::to_string(i) + ": " + e.what());
    }
  });
  return out;
}

/// Mean and standard deviation of the coefficient and solution entries.
inline Normalizer compute_normalizer(const PDEProblem& problem, const std::vector<GridField>& fields) {
  auto stats = [&](IndexRange r) {
    double sum = 0.0, sq = 0.0;
    double count = 0.0;
    for (const auto& f : fields) {
      const auto seg = f.data.segment(r.begin, r.size());
      sum += seg.sum();
      sq += seg.squaredNorm();
      count += static_cast<double>(r.size());
    }
    const double mean = sum / count;
    const double var = std::max(sq / count - mean * mean, 0.0);
    return ChannelStats{mean, var > 0.0 ? std::sqrt(var) : 1.0};
  };
  return Normalizer(problem, stats(problem.coefficient_range()), stats(problem.solution_range()));
}

inline nlohmann::json problem_to_json(const PDEProblem& p) {
  return {{"kind", to_string(p.kind())}, {"nx", p.nx()},           {"ny", p.ny()},
          {"h", p.h()},                  {"k", p.wavenumber()},   {"q", p.source()},
          {"nu", p.viscosity()},         {"horizon", p.horizon()}};
}

inline PDEProblem problem_from_json(const nlohmann::json& j) {
  const PdeKind kind = pde_kind_from_string(j.at("kind").get<std::string>());
  const int nx = j.value("nx", kind == PdeKind::Burgers ? 128 : 32);
  switch (kind) {
    case PdeKind::Poisson: return PDEProblem::poisson(nx);
    case PdeKind::Helmholtz: return PDEProblem::helmholtz(nx, j.value("k", 1.0));
    case PdeKind::Darcy: return PDEProblem::darcy(nx, j.value("q", 1.0));
    case PdeKind::Burgers:
      return PDEProblem::burgers(nx, j.value("ny", 128), j.value("nu", 0.01), j.value("horizon", 1.0));
  }
  throw ConfigError("unreachable PDE kind");
}

/// A dataset as stored on disk: manifest.json plus train/ and test/ field files.
struct Dataset {
  PDEProblem problem = PDEProblem::poisson(32);
  GRFParams grf;
  std::uint64_t seed = 0;
  Normalizer normalizer;
  std::vector<GridField> train;
  std::vector<GridField> test;

  nlohmann::json manifest() const {
    nlohmann::json j;
    j["problem"] = problem_to_json(problem);
    j["grf_train"] = grf.to_json();
    j["grf_test"] = split_params(grf, Split::Test).to_json();
    j["test_length_scale_factor"] = kTestLengthScaleFactor;
    j["normalization"] = normalizer.to_json();
    j["seed"] = seed;
    j["train_count"] = train.size();
    j["test_count"] = test.size();
    j["train_files"] = file_names("train", train.size());
    j["test_files"] = file_names("test", test.size());
    return j;
  }

  static std::vector<std::string> file_names(const std::string& split, std::size_t count) {
    std::vector<std::string> names;
    names.reserve(count);
    char buf[32];
    for (std::size_t i = 0; i < count; ++i) {
      std::snprintf(buf, sizeof(buf), "%06zu.fm4", i);
      names.push_back(split + "/" + buf);
    }
    return names;
  }
};

inline Dataset build_dataset(const PDEProblem& problem, const GRFParams& grf, std::size_t train_count,
                             std::size_t test_count, std::uint64_t seed) {
  Dataset ds{problem, grf, seed, {}, {}, {}};
  ds.train = generate_dataset(problem, grf, train_count, seed, Split::Train);
  ds.test = generate_dataset(problem, grf, test_count, seed, Split::Test);
  ds.normalizer = compute_normalizer(problem, ds.train);
  return ds;
}

/// Writes the dataset and returns the FNV-1a fingerprint of everything written.
inline std::uint64_t save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "train");
  fs::create_directories(dir / "test");
  const nlohmann::json manifest = ds.manifest();
  const std::string text = manifest.dump(2) + "\n";
  std::uint64_t hash = fnv1a(text.data(), text.size());
  {
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    out << text;
  }
  auto dump = [&](const std::vector<GridField>& fields, const nlohmann::json& names) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      const std::string bytes = encode_field(fields[i]);
      hash = fnv1a(bytes.data(), bytes.size(), hash);
      std::ofstream out(dir / names[i].get<std::string>(), std::ios::binary | std::ios::trunc);
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      if (!out) throw std::runtime_error("save_dataset: write failed");
    }
  };
  dump(ds.train, manifest["train_files"]);
  dump(ds.test, manifest["test_files"]);
  return hash;
}

inline Dataset load_dataset(const std::filesystem::path& dir, bool load_train = true) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) {
    throw ConfigError("dataset manifest not found: " + manifest_path.string());
  }
  const nlohmann::json m = nlohmann::json::parse(read_bytes(manifest_path));
  Dataset ds{problem_from_json(m.at("problem")), GRFParams::from_json(m.at("grf_train")),
             m.at("seed").get<std::uint64_t>(), {}, {}, {}};
  ds.normalizer = Normalizer::from_json(ds.problem, m.at("normalization"));
  auto load = [&](const nlohmann::json& names, std::vector<GridField>& into) {
    for (const auto& name : names) {
      GridField f = read_field(dir / name.get<std::string>());
      if (f.data.size() != ds.problem.dim()) throw FormatError("dataset field has wrong size: " + name.get<std::string>());
      into.push_back(std::move(f));
    }
  };
  if (load_train) load(m.at("train_files"), ds.train);
  load(m.at("test_files"), ds.test);
  return ds;
}

}  // namespace fm4pde
