#include "layoutseq/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "layoutseq/error.hpp"

namespace layoutseq {

AdamWState AdamWState::zeros_like(std::span<const Tensor> params) {
  AdamWState state;
  for (const Tensor& p : params) {
    state.m.emplace_back(p.numel(), Real{0});
    state.v.emplace_back(p.numel(), Real{0});
  }
  return state;
}

void adamw_update(std::span<Real> param, std::span<const Real> grad, std::span<Real> m,
                  std::span<Real> v, std::int64_t step, const AdamWConfig& config, double lr) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw DimensionError("adamw: parameter has " + std::to_string(param.size()) +
                         " values but gradient/moments have " + std::to_string(grad.size()) + "/" +
                         std::to_string(m.size()) + "/" + std::to_string(v.size()));
  }
  if (step < 1) throw ParameterError("adamw: step counter must be >= 1");
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  const double decay = lr * config.weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    m[i] = static_cast<Real>(config.beta1 * m[i] + (1.0 - config.beta1) * g);
    v[i] = static_cast<Real>(config.beta2 * v[i] + (1.0 - config.beta2) * g * g);
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    double p = param[i];
    p -= decay * p;
    p -= lr * m_hat / (std::sqrt(v_hat) + config.eps);
    param[i] = static_cast<Real>(p);
  }
}

void adamw_step(std::span<Tensor> params, AdamWState& state, const AdamWConfig& config, double lr) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adamw: optimizer state tracks " + std::to_string(state.m.size()) +
                         " tensors, got " + std::to_string(params.size()));
  }
  ++state.step;
  std::vector<Real> zeros;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    std::span<const Real> grad = p.grad();
    if (grad.empty()) {
      zeros.assign(p.numel(), Real{0});
      grad = zeros;
    }
    adamw_update(p.mutable_values(), grad, state.m[i], state.v[i], state.step, config, lr);
  }
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr,
                 double warm_fraction) {
  if (total_steps <= 0) throw ParameterError("cosine_lr: total_steps must be positive");
  if (step < 0 || step > total_steps) {
    throw ParameterError("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                         std::to_string(total_steps) + "]");
  }
  if (!(warm_fraction >= 0.0 && warm_fraction < 1.0)) {
    throw ParameterError("cosine_lr: warm_fraction must lie in [0, 1)");
  }
  const double t = static_cast<double>(step);
  const double total = static_cast<double>(total_steps);
  const double start = warm_fraction * total;
  if (t < start) return base_lr;
  const double u = (t - start) / (total - start);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * u));
}

}  // namespace layoutseq
