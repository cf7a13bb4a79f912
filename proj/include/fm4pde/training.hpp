#pragma once

#include "fm4pde/common.hpp"
#include "fm4pde/network.hpp"

#include <json.hpp>

#include <cmath>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

namespace fm4pde {

struct TrainConfig {
  std::size_t batch = 64;
  std::size_t steps = 20000;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  bool cosine = false;  // cosine decay of the learning rate to zero over `steps`
  std::uint64_t seed = 0;

  void validate() const {
    if (batch < 1) throw DomainError("TrainConfig: batch must be positive");
    if (!(lr > 0.0)) throw DomainError("TrainConfig: lr must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0)) {
      throw DomainError("TrainConfig: betas must lie in (0, 1)");
    }
    if (!(adam_eps > 0.0)) throw DomainError("TrainConfig: adam_eps must be positive");
  }

  nlohmann::json to_json() const {
    return {{"batch", batch}, {"steps", steps},       {"lr", lr},         {"betas", {beta1, beta2}},
            {"adam_eps", adam_eps}, {"cosine", cosine}, {"seed", seed}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.batch = j.value("batch", c.batch);
    c.steps = j.value("steps", c.steps);
    c.lr = j.value("lr", c.lr);
    if (j.contains("betas")) {
      c.beta1 = j.at("betas").at(0).get<double>();
      c.beta2 = j.at("betas").at(1).get<double>();
    }
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.cosine = j.value("cosine", c.cosine);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  }
};

/// Frozen (t, x0) draw for one batch; columns are samples.
struct CfmDraw {
  Vector times;
  Matrix noise;
};

inline CfmDraw draw_cfm(Eigen::Index dim, Eigen::Index batch, Rng& rng) {
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  CfmDraw d{Vector(batch), Matrix(dim, batch)};
  for (Eigen::Index j = 0; j < batch; ++j) {
    d.times[j] = uniform(rng);
    for (Eigen::Index i = 0; i < dim; ++i) d.noise(i, j) = normal(rng);
  }
  return d;
}

/// Mean over the batch of ||net(t, x_t) - (x1 - x0)||^2 / d on a fixed draw.
/// When grad is non-null it receives the parameter gradient.
inline double cfm_loss(const VelocityNet& net, const Matrix& x1, const CfmDraw& draw, Vector* grad = nullptr) {
  const Eigen::Index d = net.state_dim();
  const Eigen::Index batch = x1.cols();
  if (batch < 1) throw DomainError("cfm_loss: empty batch");
  if (x1.rows() != d || draw.noise.rows() != d || draw.noise.cols() != batch || draw.times.size() != batch) {
    throw ContractError("cfm_loss: batch shape mismatch");
  }
  Matrix xt(d, batch);
  for (Eigen::Index j = 0; j < batch; ++j) {
    const double t = draw.times[j];
    xt.col(j) = t * x1.col(j) + (1.0 - t) * draw.noise.col(j);
  }
  const Matrix target = x1 - draw.noise;
  VelocityNet::Tape tape;
  const Matrix diff = net.forward(draw.times, xt, grad ? &tape : nullptr) - target;
  const double scale = 1.0 / static_cast<double>(d * batch);
  if (grad) {
    grad->setZero(net.num_params());
    net.backward(tape, diff * (2.0 * scale), grad, nullptr);
  }
  return diff.squaredNorm() * scale;
}

inline double cfm_loss(const VelocityNet& net, const Matrix& x1, Rng& rng, Vector* grad = nullptr) {
  const CfmDraw draw = draw_cfm(net.state_dim(), x1.cols(), rng);
  return cfm_loss(net, x1, draw, grad);
}

/// Adam with bias correction over the flat parameter vector.
class Adam {
 public:
  Adam(Eigen::Index n, double beta1, double beta2, double eps)
      : m_(Vector::Zero(n)), v_(Vector::Zero(n)), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(Vector& params, const Vector& grad, double lr) {
    ++t_;
    m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
    v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    params.array() -= lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
  }

 private:
  Vector m_, v_;
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

struct TrainResult {
  std::vector<double> losses;
  std::int64_t steps_completed = 0;
};

inline double learning_rate(const TrainConfig& cfg, std::int64_t step) {
  if (!cfg.cosine || cfg.steps == 0) return cfg.lr;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.steps));
  return 0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * frac));
}

/// Trains `net` in place on the columns of `data` (normalized samples).
///
/// Every step draws its batch from RNG stream (seed, step), so a run resumed
/// at `start_step` sees the same data sequence as an uninterrupted one.
/// Optimizer moments start fresh on resume.
inline TrainResult train(VelocityNet& net, const Matrix& data, const TrainConfig& cfg, std::int64_t start_step = 0,
                         const std::function<void(std::int64_t, double)>& on_step = {}) {
  cfg.validate();
  if (data.rows() != net.state_dim()) throw ContractError("train: data dimension does not match network");
  if (data.cols() < 1) throw DomainError("train: empty dataset");
  Adam adam(net.num_params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
  TrainResult result;
  result.losses.reserve(cfg.steps);
  const auto batch = static_cast<Eigen::Index>(cfg.batch);
  Matrix x1(net.state_dim(), batch);
  Vector grad(net.num_params());
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const std::int64_t step = start_step + static_cast<std::int64_t>(s);
    Rng rng = make_rng(cfg.seed, 0x7472000000000000ull + static_cast<std::uint64_t>(step));
    std::uniform_int_distribution<Eigen::Index> pick(0, data.cols() - 1);
    for (Eigen::Index j = 0; j < batch; ++j) x1.col(j) = data.col(pick(rng));
    const double loss = cfm_loss(net, x1, rng, &grad);
    if (!std::isfinite(loss) || !grad.allFinite()) {
      std::ostringstream msg;
      msg << "training diverged at step " << step << ": loss = " << loss;
      throw DivergenceError(msg.str());
    }
    adam.step(net.params(), grad, learning_rate(cfg, step));
    result.losses.push_back(loss);
    if (on_step) on_step(step, loss);
  }
  result.steps_completed = start_step + static_cast<std::int64_t>(cfg.steps);
  return result;
}

/// Trailing moving average with the given window; entry i averages
/// losses[max(0, i - window + 1) .. i].
inline std::vector<double> moving_average(const std::vector<double>& xs, std::size_t window) {
  if (window < 1) throw DomainError("moving_average: window must be positive");
  std::vector<double> out(xs.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sum += xs[i];
    if (i >= window) sum -= xs[i - window];
    out[i] = sum / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

}  // namespace fm4pde
