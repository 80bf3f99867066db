#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "qid/numerics/tensor.hpp"

namespace qid {

struct AdamWConfig {
  double base_lr = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t warmup_steps = 100;
};

/// Linear warmup to base_lr over warmup_steps, constant afterwards.
inline double warmup_lr(const AdamWConfig& cfg, std::uint64_t step) {
  if (cfg.warmup_steps == 0) return cfg.base_lr;
  return cfg.base_lr * std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.warmup_steps));
}

template <std::floating_point S>
struct OptimizerState {
  AdamWConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<S>> first_moment;
  std::vector<std::vector<S>> second_moment;

  explicit OptimizerState(AdamWConfig cfg = {}) : config(cfg) {
    if (config.warmup_steps == 0) throw ConfigError("AdamW: warmup_steps must be positive");
  }

  double current_lr() const { return warmup_lr(config, step); }
};

/// One AdamW update. The step counter is incremented before it is used for
/// bias correction and the warmup schedule. Weight decay is decoupled:
/// theta <- theta - lr * wd * theta, applied before the moment update.
/// Parameters without a gradient are treated as having a zero gradient.
template <std::floating_point S>
void adamw_step(OptimizerState<S>& state, std::vector<Tensor<S>>& params) {
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.numel(), S{0});
      state.second_moment.emplace_back(p.numel(), S{0});
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ContractError("adamw_step: optimizer tracks " + std::to_string(state.first_moment.size()) +
                        " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (state.first_moment[k].size() != params[k].numel()) {
      throw ContractError("adamw_step: moment shape does not match parameter " + std::to_string(k) + " " +
                          shape_string(params[k].shape()));
    }
  }

  ++state.step;
  const auto& cfg = state.config;
  const double lr = warmup_lr(cfg, state.step);
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);

  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    auto values = p.mutable_data();
    auto grad = p.grad();
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const S g = grad.empty() ? S{0} : grad[i];
      if (cfg.weight_decay != 0.0) values[i] -= static_cast<S>(lr * cfg.weight_decay) * values[i];
      m[i] = b1 * m[i] + (S{1} - b1) * g;
      v[i] = b2 * v[i] + (S{1} - b2) * g * g;
      const double m_hat = static_cast<double>(m[i]) / bc1;
      const double v_hat = static_cast<double>(v[i]) / bc2;
      values[i] -= static_cast<S>(lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
    }
  }
}

}  // namespace qid
