#pragma once

#include "fm4pde/common.hpp"

#include <json.hpp>
#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <optional>
#include <vector>

namespace fm4pde {

/// Threshold a field at a quantile: entries at or above it become `high`,
/// the rest `low`.
struct Binarize {
  double high = 12.0;
  double low = 4.0;
  double quantile = 0.5;
};

/// Stationary Gaussian random field on the periodic unit box with squared
/// exponential covariance variance * exp(-r^2 / (2 length_scale^2)).
struct GRFParams {
  double length_scale = 0.1;
  double variance = 1.0;
  double mean = 0.0;
  std::optional<Binarize> binarize;

  nlohmann::json to_json() const {
    nlohmann::json j{{"length_scale", length_scale}, {"variance", variance}, {"mean", mean}};
    if (binarize) {
      j["binarize"] = {{"high", binarize->high}, {"low", binarize->low}, {"quantile", binarize->quantile}};
    } else {
      j["binarize"] = nullptr;
    }
    return j;
  }

  static GRFParams from_json(const nlohmann::json& j) {
    GRFParams p;
    p.length_scale = j.value("length_scale", p.length_scale);
    p.variance = j.value("variance", p.variance);
    p.mean = j.value("mean", p.mean);
    if (j.contains("binarize") && !j.at("binarize").is_null()) {
      const auto& b = j.at("binarize");
      p.binarize = Binarize{b.value("high", 12.0), b.value("low", 4.0), b.value("quantile", 0.5)};
    }
    return p;
  }
};

namespace detail {

inline int wavenumber(int index, int n) { return index <= n / 2 ? index : index - n; }

inline void binarize_in_place(Vector& field, const Binarize& b) {
  if (!(b.quantile >= 0.0 && b.quantile < 1.0)) throw DomainError("GRF: binarize quantile must lie in [0, 1)");
  std::vector<double> sorted(field.data(), field.data() + field.size());
  const auto rank = static_cast<std::size_t>(std::floor(b.quantile * static_cast<double>(sorted.size())));
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(rank), sorted.end());
  const double threshold = sorted[rank];
  for (Eigen::Index i = 0; i < field.size(); ++i) field[i] = field[i] >= threshold ? b.high : b.low;
}

}  // namespace detail

/// Spectral synthesis: white noise filtered by the square root of the
/// covariance spectrum, then rescaled so the pointwise variance is exact.
/// rows == 1 gives a 1D field of length cols. Output is row-major.
inline Vector sample_grf(const GRFParams& params, int rows, int cols, Rng& rng) {
  if (rows < 1 || cols < 1) throw DomainError("sample_grf: empty grid");
  if (!(params.length_scale > 0.0)) throw DomainError("sample_grf: length_scale must be positive");
  if (!(params.variance >= 0.0)) throw DomainError("sample_grf: variance must be nonnegative");
  const Eigen::Index total = Eigen::Index(rows) * cols;
  Vector field;
  if (params.variance == 0.0) {
    field = Vector::Constant(total, params.mean);
  } else {
    using Complex = std::complex<double>;
    Eigen::FFT<double> fft;
    const Vector noise = standard_normal(total, rng);
    std::vector<std::vector<Complex>> spec(rows, std::vector<Complex>(cols));
    std::vector<Complex> in, out;
    for (int r = 0; r < rows; ++r) {
      in.assign(noise.data() + Eigen::Index(r) * cols, noise.data() + Eigen::Index(r + 1) * cols);
      fft.fwd(out, in);
      spec[r] = out;
    }
    if (rows > 1) {
      for (int c = 0; c < cols; ++c) {
        in.resize(rows);
        for (int r = 0; r < rows; ++r) in[r] = spec[r][c];
        fft.fwd(out, in);
        for (int r = 0; r < rows; ++r) spec[r][c] = out[r];
      }
    }
    const double l2 = params.length_scale * params.length_scale;
    double mean_square = 0.0;
    std::vector<double> filter(static_cast<std::size_t>(total));
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        const double kr = rows > 1 ? detail::wavenumber(r, rows) : 0.0;
        const double kc = detail::wavenumber(c, cols);
        const double g = std::exp(-std::numbers::pi * std::numbers::pi * l2 * (kr * kr + kc * kc));
        filter[static_cast<std::size_t>(r) * cols + c] = g;
        mean_square += g * g;
      }
    }
    mean_square /= static_cast<double>(total);
    const double norm = std::sqrt(params.variance / mean_square);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) spec[r][c] *= norm * filter[static_cast<std::size_t>(r) * cols + c];
    if (rows > 1) {
      for (int c = 0; c < cols; ++c) {
        in.resize(rows);
        for (int r = 0; r < rows; ++r) in[r] = spec[r][c];
        fft.inv(out, in);
        for (int r = 0; r < rows; ++r) spec[r][c] = out[r];
      }
    }
    field.resize(total);
    for (int r = 0; r < rows; ++r) {
      fft.inv(out, spec[r]);
      for (int c = 0; c < cols; ++c) field[Eigen::Index(r) * cols + c] = params.mean + out[c].real();
    }
  }
  if (params.binarize) detail::binarize_in_place(field, *params.binarize);
  return field;
}

}  // namespace fm4pde
