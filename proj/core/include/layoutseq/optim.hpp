#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "layoutseq/tensor.hpp"

namespace layoutseq {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// First and second moments per parameter tensor, plus the step counter.
struct AdamWState {
  std::vector<std::vector<Real>> m;
  std::vector<std::vector<Real>> v;
  std::int64_t step = 0;

  /// Zero moments shaped like `params`.
  static AdamWState zeros_like(std::span<const Tensor> params);
};

/// One AdamW update of a single parameter buffer. `step` is the 1-based step
/// index used for bias correction. Decay is decoupled: param -= lr * wd * param
/// happens separately from the adaptive step.
void adamw_update(std::span<Real> param, std::span<const Real> grad, std::span<Real> m,
                  std::span<Real> v, std::int64_t step, const AdamWConfig& config, double lr);

/// Advances `state.step` and updates every parameter from its accumulated
/// gradient (a parameter without a gradient buffer is treated as zero grad).
void adamw_step(std::span<Tensor> params, AdamWState& state, const AdamWConfig& config, double lr);

/// Constant `base_lr` until warm_fraction * total_steps, then cosine annealing
/// to exactly 0 at total_steps.
double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr,
                 double warm_fraction = 0.75);

}  // namespace layoutseq
