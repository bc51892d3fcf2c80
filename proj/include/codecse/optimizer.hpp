#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "codecse/params.hpp"

namespace codecse {

struct AdamConfig {
  double learning_rate = 2.5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  // Learning rate ramps linearly from 0 to learning_rate over this many steps.
  std::uint64_t warmup_steps = 0;
};

struct OptimizerState {
  AdamConfig config;
  std::uint64_t step = 0;
  GradientSet first_moment;
  GradientSet second_moment;

  static OptimizerState create(const ParameterStore& params, const AdamConfig& config);
  double current_learning_rate() const;
};

// Decoupled-weight-decay Adam. Frozen parameters are skipped. If any gradient
// is non-finite nothing is updated and a numeric error naming the parameter is
// thrown.
void adam_update(ParameterStore& params, const GradientSet& grads, OptimizerState& state);

struct GradCheckOptions {
  double step = 1e-5;
  // Entries sampled per parameter tensor; 0 checks every entry.
  std::size_t max_entries_per_param = 0;
  // Relative error denominator floor: |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  std::uint64_t seed = 1;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t entries_checked = 0;
  std::string worst_param;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// loss(params, grads) returns the loss and, when grads is non-null,
// accumulates analytic gradients into it.
using LossClosure = std::function<double(const ParameterStore&, GradientSet*)>;

GradCheckReport grad_check(const LossClosure& loss, ParameterStore& params,
                           const GradCheckOptions& options = {});

}  // namespace codecse
