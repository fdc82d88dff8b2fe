#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "relay/tensor.hpp"

namespace relay {

/// Linear warmup to `base_lr`, then cosine decay to `min_lr` at `total_steps`.
struct CosineSchedule {
  double base_lr = 1e-4;
  double min_lr = 5e-7;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;

  /// Learning rate for the update with zero-based index `step`.
  double lr_at(std::size_t step) const {
    if (step < warmup_steps) {
      return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    }
    const std::size_t span = total_steps > warmup_steps ? total_steps - warmup_steps : 1;
    const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(span));
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  }
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  CosineSchedule schedule;
};

template <typename Scalar>
struct OptimState {
  std::size_t step_count = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  AdamWConfig config;
};

template <typename Scalar>
OptimState<Scalar> make_optim_state(const std::vector<Tensor<Scalar>>& params, const AdamWConfig& config) {
  OptimState<Scalar> state;
  state.config = config;
  for (const auto& p : params) {
    state.first_moment.emplace_back(p.size(), 0.0);
    state.second_moment.emplace_back(p.size(), 0.0);
  }
  return state;
}

/// One AdamW update over `params` using their accumulated gradients.
/// Parameters without a gradient buffer are treated as having zero gradient.
/// `frozen[i]`, when given, skips parameter i (moments untouched).
/// Returns the learning rate that was applied.
template <typename Scalar>
double adamw_step(std::vector<Tensor<Scalar>>& params, OptimState<Scalar>& state,
                  const std::vector<bool>& frozen = {}) {
  if (state.first_moment.size() != params.size()) throw ShapeError("adamw_step: state/parameter count mismatch");
  const AdamWConfig& cfg = state.config;
  const double lr = cfg.schedule.lr_at(state.step_count);
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double bias1 = 1.0 - std::pow(cfg.beta1, t);
  const double bias2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!frozen.empty() && frozen[i]) continue;
    auto& p = params[i];
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.size() != p.size()) throw ShapeError("adamw_step: moment shape mismatch");
    const bool has_grad = p.has_grad();
    const auto grad = p.grad();
    auto value = p.mutable_data();
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = has_grad ? static_cast<double>(grad[j]) : 0.0;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      double w = static_cast<double>(value[j]);
      w -= lr * cfg.weight_decay * w;
      w -= lr * (m[j] / bias1) / (std::sqrt(v[j] / bias2) + cfg.eps);
      value[j] = static_cast<Scalar>(w);
    }
  }
  return lr;
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// 0 disables clipping. Returns the norm before clipping.
template <typename Scalar>
double clip_grad_norm(std::vector<Tensor<Scalar>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (const Scalar g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (auto& g : p.mutable_grad()) g = static_cast<Scalar>(static_cast<double>(g) * s);
    }
  }
  return norm;
}

template <typename Scalar>
void zero_grad(std::vector<Tensor<Scalar>>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace relay
