#include "codecse/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "codecse/error.hpp"

namespace codecse {

OptimizerState OptimizerState::create(const ParameterStore& params, const AdamConfig& config) {
  OptimizerState s;
  s.config = config;
  s.first_moment = params.zero_gradients();
  s.second_moment = params.zero_gradients();
  return s;
}

double OptimizerState::current_learning_rate() const {
  const double lr = config.learning_rate;
  if (config.warmup_steps == 0) return lr;
  const double ramp = static_cast<double>(std::max<std::uint64_t>(step, 1)) /
                      static_cast<double>(config.warmup_steps);
  return lr * std::min(1.0, ramp);
}

void adam_update(ParameterStore& params, const GradientSet& grads, OptimizerState& state) {
  require(grads.size() == params.size() && state.first_moment.size() == params.size(),
          ErrorKind::kShape, "adam_update: gradient/state count does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    require(grads[i].size() == params[i].value.size(), ErrorKind::kShape,
            "adam_update: gradient shape mismatch for '" + params[i].name + "'");
    require(grads[i].all_finite(), ErrorKind::kNumeric,
            "adam_update: non-finite gradient for '" + params[i].name + "'");
  }
  ++state.step;
  const auto& cfg = state.config;
  const double lr = state.current_learning_rate();
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    auto p = params[i].value.values();
    auto g = grads[i].values();
    auto m = state.first_moment[i].values();
    auto v = state.second_moment[i].values();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= lr * (mhat / (std::sqrt(vhat) + cfg.epsilon) + cfg.weight_decay * p[j]);
    }
  }
}

GradCheckReport grad_check(const LossClosure& loss, ParameterStore& params,
                           const GradCheckOptions& options) {
  GradientSet analytic = params.zero_gradients();
  const double base = loss(params, &analytic);
  require(std::isfinite(base), ErrorKind::kNumeric, "grad_check: non-finite loss");

  GradCheckReport report;
  std::mt19937_64 rng(options.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = params[pi];
    if (!p.trainable) continue;
    std::vector<std::size_t> entries(p.value.size());
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    if (options.max_entries_per_param > 0 && entries.size() > options.max_entries_per_param) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(options.max_entries_per_param);
    }
    for (std::size_t j : entries) {
      const double orig = p.value[j];
      p.value[j] = orig + options.step;
      const double up = loss(params, nullptr);
      p.value[j] = orig - options.step;
      const double down = loss(params, nullptr);
      p.value[j] = orig;
      require(std::isfinite(up) && std::isfinite(down), ErrorKind::kNumeric,
              "grad_check: non-finite loss while perturbing '" + p.name + "'");
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[pi][j];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.entries_checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = p.name + "[" + std::to_string(j) + "]";
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace codecse
