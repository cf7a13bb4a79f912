#pragma once

#include "fm4pde/common.hpp"
#include "fm4pde/velocity.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace fm4pde {

static_assert(std::endian::native == std::endian::little,
              "binary formats are written with native little-endian doubles");

struct NetArchitecture {
  Eigen::Index state_dim = 1;
  int time_features = 16;
  std::vector<int> hidden{256, 256, 256};
  /// When positive the network returns MLP(x, t) + c(t) x, where c is the
  /// exact velocity gain of the flow to N(0, skip_std^2 I). The skip carries
  /// the full-rank noise removal that a narrow output layer cannot express,
  /// and the MLP learns only the residual.
  double skip_std = 0.0;

  bool operator==(const NetArchitecture&) const = default;
};

inline double gelu(double z) { return 0.5 * z * (1.0 + std::erf(z * std::numbers::sqrt2 / 2.0)); }

inline double gelu_grad(double z) {
  const double cdf = 0.5 * (1.0 + std::erf(z * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + z * pdf;
}

/// Fully connected velocity network: [x, sinusoidal(t)] -> hidden GELU layers -> d,
/// plus the optional Gaussian skip described on NetArchitecture.
///
/// All parameters live in one flat vector (layer by layer: W column-major,
/// then b) which makes the optimizer and the weight file trivial.
class VelocityNet {
 public:
  /// Activations recorded by a forward pass; consumed by backward().
  struct Tape {
    std::vector<Matrix> inputs;  // input to each layer
    std::vector<Matrix> pre;     // pre-activation of each hidden layer
    Vector times;
  };

  VelocityNet(NetArchitecture arch, std::uint64_t seed) : arch_(std::move(arch)) {
    layout();
    params_.resize(num_params_);
    Rng rng = make_rng(seed, 0x6e6574);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t l = 0; l < shapes_.size(); ++l) {
      const double scale = 1.0 / std::sqrt(static_cast<double>(shapes_[l].in));
      auto w = weight(l);
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = scale * normal(rng);
      bias(l).setZero();
    }
  }

  VelocityNet(NetArchitecture arch, Vector params) : arch_(std::move(arch)) {
    layout();
    if (params.size() != num_params_) {
      throw FormatError("VelocityNet: expected " + std::to_string(num_params_) +
                        " parameters, got " + std::to_string(params.size()));
    }
    params_ = std::move(params);
  }

  VelocityNet(const VelocityNet&) = default;
  VelocityNet& operator=(const VelocityNet&) = default;

  const NetArchitecture& architecture() const { return arch_; }
  Eigen::Index state_dim() const { return arch_.state_dim; }
  Eigen::Index num_params() const { return num_params_; }
  const Vector& params() const { return params_; }
  Vector& params() { return params_; }
  std::size_t num_layers() const { return shapes_.size(); }

  Vector embed_time(double t) const {
    Vector e(arch_.time_features);
    const int pairs = arch_.time_features / 2;
    for (int k = 0; k < pairs; ++k) {
      const double omega = std::numbers::pi * std::exp2(0.5 * k);
      e[2 * k] = std::sin(omega * t);
      e[2 * k + 1] = std::cos(omega * t);
    }
    if (arch_.time_features % 2 == 1) e[arch_.time_features - 1] = t;
    return e;
  }

  /// Batched forward pass; column j of states is evaluated at times[j].
  Matrix forward(const Vector& times, const Matrix& states, Tape* tape = nullptr) const {
    if (states.rows() != arch_.state_dim || times.size() != states.cols()) {
      throw ContractError("VelocityNet::forward: shape mismatch");
    }
    const Eigen::Index batch = states.cols();
    Matrix a(arch_.state_dim + arch_.time_features, batch);
    a.topRows(arch_.state_dim) = states;
    for (Eigen::Index j = 0; j < batch; ++j) a.col(j).tail(arch_.time_features) = embed_time(times[j]);
    if (tape) {
      tape->inputs.clear();
      tape->pre.clear();
      tape->times = times;
    }
    const std::size_t last = shapes_.size() - 1;
    for (std::size_t l = 0; l < last; ++l) {
      Matrix z = weight(l) * a;
      z.colwise() += bias(l);
      if (tape) {
        tape->inputs.push_back(std::move(a));
        tape->pre.push_back(z);
      }
      a = z.unaryExpr([](double v) { return gelu(v); });
    }
    Matrix out = weight(last) * a;
    out.colwise() += bias(last);
    if (tape) tape->inputs.push_back(std::move(a));
    if (arch_.skip_std > 0.0) {
      for (Eigen::Index j = 0; j < batch; ++j) out.col(j) += skip_gain(times[j]) * states.col(j);
    }
    return out;
  }

  Vector forward(double t, const Vector& x) const {
    Vector times(1);
    times[0] = t;
    return forward(times, Matrix(x)).col(0);
  }

  /// Reverse pass for cotangent d_out on the outputs of a recorded forward.
  /// Parameter gradients are added into *d_params; input gradients with
  /// respect to the states (time features excluded) are written to *d_states.
  void backward(const Tape& tape, const Matrix& d_out, Vector* d_params, Matrix* d_states) const {
    if (tape.inputs.size() != shapes_.size()) throw ContractError("VelocityNet::backward: bad tape");
    if (d_params && d_params->size() != num_params_) d_params->setZero(num_params_);
    Matrix g = d_out;
    Matrix d_skip;
    if (arch_.skip_std > 0.0 && d_states) {
      d_skip = d_out;
      for (Eigen::Index j = 0; j < g.cols(); ++j) d_skip.col(j) *= skip_gain(tape.times[j]);
    }
    for (std::size_t l = shapes_.size(); l-- > 0;) {
      if (d_params) {
        Eigen::Map<Matrix> dw(d_params->data() + shapes_[l].offset, shapes_[l].out, shapes_[l].in);
        Eigen::Map<Vector> db(d_params->data() + shapes_[l].offset + shapes_[l].out * shapes_[l].in,
                              shapes_[l].out);
        dw.noalias() += g * tape.inputs[l].transpose();
        db += g.rowwise().sum();
      }
      if (l == 0 && !d_states) break;
      Matrix da = weight(l).transpose() * g;
      if (l == 0) {
        *d_states = da.topRows(arch_.state_dim);
        if (d_skip.size() > 0) *d_states += d_skip;
        break;
      }
      g = da.cwiseProduct(tape.pre[l - 1].unaryExpr([](double v) { return gelu_grad(v); }));
    }
  }

  /// (d net / d x)^T v at a single (t, x).
  Vector input_vjp(double t, const Vector& x, const Vector& v) const {
    Tape tape;
    Vector times(1);
    times[0] = t;
    forward(times, Matrix(x), &tape);
    Matrix d_states;
    backward(tape, Matrix(v), nullptr, &d_states);
    return d_states.col(0);
  }

 private:
  struct Shape {
    Eigen::Index in;
    Eigen::Index out;
    Eigen::Index offset;
  };

  double skip_gain(double t) const {
    const double s2 = arch_.skip_std * arch_.skip_std;
    const double r = 1.0 - t;
    return (t * s2 - r) / (t * t * s2 + r * r);
  }

  void layout() {
    if (!(arch_.skip_std >= 0.0)) throw DomainError("VelocityNet: skip_std must be >= 0");
    if (arch_.state_dim < 1) throw DomainError("VelocityNet: state_dim must be positive");
    if (arch_.time_features < 0) throw DomainError("VelocityNet: time_features must be >= 0");
    shapes_.clear();
    Eigen::Index in = arch_.state_dim + arch_.time_features;
    Eigen::Index offset = 0;
    auto add = [&](Eigen::Index out) {
      shapes_.push_back({in, out, offset});
      offset += out * in + out;
      in = out;
    };
    for (int width : arch_.hidden) {
      if (width < 1) throw DomainError("VelocityNet: hidden widths must be positive");
      add(width);
    }
    add(arch_.state_dim);
    num_params_ = offset;
  }

  Eigen::Map<Matrix> weight(std::size_t l) {
    return {params_.data() + shapes_[l].offset, shapes_[l].out, shapes_[l].in};
  }
  Eigen::Map<const Matrix> weight(std::size_t l) const {
    return {params_.data() + shapes_[l].offset, shapes_[l].out, shapes_[l].in};
  }
  Eigen::Map<Vector> bias(std::size_t l) {
    return {params_.data() + shapes_[l].offset + shapes_[l].out * shapes_[l].in, shapes_[l].out};
  }
  Eigen::Map<const Vector> bias(std::size_t l) const {
    return {params_.data() + shapes_[l].offset + shapes_[l].out * shapes_[l].in, shapes_[l].out};
  }

  NetArchitecture arch_;
  std::vector<Shape> shapes_;
  Eigen::Index num_params_ = 0;
  Vector params_;
};

/// Velocity backend backed by a trained network.
class TrainedVelocity final : public VelocityModel {
 public:
  explicit TrainedVelocity(std::shared_ptr<const VelocityNet> net) : net_(std::move(net)) {
    if (!net_) throw ContractError("TrainedVelocity: null network");
  }
  Eigen::Index dim() const override { return net_->state_dim(); }
  std::string name() const override { return "trained"; }
  Vector velocity(double t, const Vector& x) const override { return net_->forward(t, x); }
  Vector velocity_vjp(double t, const Vector& x, const Vector& v) const override {
    return net_->input_vjp(t, x, v);
  }
  const VelocityNet& net() const { return *net_; }

 private:
  std::shared_ptr<const VelocityNet> net_;
};

// Weight file: "FM4PDEW1", u32 LE header byte length, UTF-8 JSON header,
// then num_params little-endian float64 values.

inline constexpr char kWeightMagic[8] = {'F', 'M', '4', 'P', 'D', 'E', 'W', '1'};

struct WeightFile {
  VelocityNet net;
  std::int64_t steps_completed = 0;
};

inline void save_weights(const VelocityNet& net, const std::filesystem::path& path,
                         std::int64_t steps_completed = 0) {
  nlohmann::json header;
  header["state_dim"] = net.architecture().state_dim;
  header["time_features"] = net.architecture().time_features;
  header["hidden"] = net.architecture().hidden;
  if (net.architecture().skip_std > 0.0) header["skip_std"] = net.architecture().skip_std;
  header["num_params"] = net.num_params();
  header["steps_completed"] = steps_completed;
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_weights: cannot open " + path.string());
  out.write(kWeightMagic, sizeof(kWeightMagic));
  const auto len = static_cast<std::uint32_t>(text.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(net.params().data()),
            static_cast<std::streamsize>(net.num_params() * sizeof(double)));
  if (!out) throw std::runtime_error("save_weights: write failed for " + path.string());
}

inline WeightFile load_weights_file(const std::filesystem::path& path,
                                    std::optional<Eigen::Index> expected_dim = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("load_weights: cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kWeightMagic, sizeof(magic)) != 0) {
    throw FormatError("load_weights: bad magic in " + path.string());
  }
  std::uint32_t len = 0;
  if (!in.read(reinterpret_cast<char*>(&len), sizeof(len)) || len > (1u << 24)) {
    throw FormatError("load_weights: truncated header length");
  }
  std::string text(len, '\0');
  if (!in.read(text.data(), len)) throw FormatError("load_weights: truncated header");
  nlohmann::json header;
  NetArchitecture arch;
  std::int64_t count = 0;
  std::int64_t steps = 0;
  try {
    header = nlohmann::json::parse(text);
    arch.state_dim = header.at("state_dim").get<Eigen::Index>();
    arch.time_features = header.at("time_features").get<int>();
    arch.hidden = header.at("hidden").get<std::vector<int>>();
    arch.skip_std = header.value("skip_std", 0.0);
    count = header.at("num_params").get<std::int64_t>();
    steps = header.value("steps_completed", std::int64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("load_weights: bad header: ") + e.what());
  }
  if (expected_dim && *expected_dim != arch.state_dim) {
    throw FormatError("load_weights: file has state_dim " + std::to_string(arch.state_dim) +
                      ", expected " + std::to_string(*expected_dim));
  }
  Vector params(count);
  if (!in.read(reinterpret_cast<char*>(params.data()),
               static_cast<std::streamsize>(count * sizeof(double)))) {
    throw FormatError("load_weights: truncated parameter block");
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("load_weights: trailing bytes after parameter block");
  }
  return {VelocityNet(std::move(arch), std::move(params)), steps};
}

inline VelocityNet load_weights(const std::filesystem::path& path,
                                std::optional<Eigen::Index> expected_dim = std::nullopt) {
  return load_weights_file(path, expected_dim).net;
}

}  // namespace fm4pde
