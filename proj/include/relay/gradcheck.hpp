#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "relay/loss_metrics.hpp"
#include "relay/model.hpp"

namespace relay {

struct GradCheckResult {
  double max_rel_error = 0;
  double max_abs_error = 0;
  std::size_t checked = 0;
  std::string worst;  // "<input>[<index>]"
};

/// Compares backward gradients of the scalar `loss()` with central
/// differences of step h. The relative error of one element is
/// |a - n| / max(|a|, |n|, floor); the default floor sits above the
/// central-difference roundoff for O(10) losses. At most `per_input`
/// elements of each input are probed, evenly strided; 0 probes all.
inline GradCheckResult gradcheck(const std::function<Tensor<double>()>& loss, std::vector<Tensor<double>> inputs,
                                 const std::vector<std::string>& names = {}, double h = 1e-5, double floor = 1e-5,
                                 std::size_t per_input = 0) {
  for (auto& x : inputs) x.zero_grad();
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& x : inputs) {
    const auto g = x.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (g.empty()) analytic.back().assign(x.size(), 0.0);
  }
  GradCheckResult r;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k].mutable_data();
    const std::size_t n = values.size();
    const std::size_t stride = per_input == 0 || n <= per_input ? 1 : n / per_input;
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = loss().item();
      values[i] = saved - h;
      const double down = loss().item();
      values[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[k][i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
      ++r.checked;
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
      if (rel > r.max_rel_error || r.worst.empty()) {
        r.max_rel_error = rel;
        r.worst = (k < names.size() ? names[k] : "input" + std::to_string(k)) + "[" + std::to_string(i) + "]";
      }
    }
  }
  return r;
}

/// Small f64 model used for the end-to-end check: d=8, one head, L=2,
/// two units per clip, n=2 relay tokens, M_f=2 queries, K=2 decoder layers.
inline ModelConfig gradcheck_model_config() {
  ModelConfig c;
  c.channels = 3;
  c.patch_side = 4;
  c.unit_size = 8;
  c.dim = 8;
  c.heads = 1;
  c.layers = 2;
  c.mlp_dim = 16;
  c.grt_count = 2;
  c.lora_rank = 2;
  c.lora_alpha = 4;
  c.queries = 2;
  c.decoder_layers = 2;
  c.low_dim = 4;
  return c;
}

/// Checks every parameter of a freshly initialised model (LoRA up-projections
/// randomised so adapter paths carry gradient) under both loss forms, on a
/// random clip [frames, unit, 2 * unit, C] against a random mask and band.
inline GradCheckResult model_gradcheck(const ModelConfig& cfg, std::uint64_t seed, std::size_t frames = 1,
                                       bool one_shot = false) {
  auto model = RelayModel<double>::init(cfg, seed);
  CounterRng rng(seed, 99);
  for (auto& p : model.named_parameters()) {
    if (p.name.ends_with(".up")) {
      for (auto& v : p.tensor.mutable_data()) v = 0.1 * rng.normal();
    }
  }
  const std::size_t h = cfg.unit_size, w = 2 * cfg.unit_size;
  Tensor<double> clip(Shape{frames, h, w, cfg.channels});
  for (auto& v : clip.mutable_data()) v = rng.uniform();
  Tensor<double> target(Shape{frames, h, w}), edge(Shape{frames, h, w});
  for (auto& v : target.mutable_data()) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
  for (auto& v : edge.mutable_data()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;

  std::vector<Tensor<double>> params;
  std::vector<std::string> names;
  for (const auto& p : model.named_parameters()) {
    params.push_back(p.tensor);
    names.push_back(p.name);
  }
  GradCheckResult worst;
  for (const bool logits : {false, true}) {
    const auto loss = [&] {
      const auto pred = forward(model, clip, one_shot);
      return logits ? combined_loss_logits(pred.pixel_logits, target, edge, 20.0)
                    : combined_loss(pred.probabilities, target, edge, 20.0);
    };
    const auto r = gradcheck(loss, params, names);
    if (r.max_rel_error >= worst.max_rel_error) worst.worst = r.worst;
    worst.max_rel_error = std::max(worst.max_rel_error, r.max_rel_error);
    worst.max_abs_error = std::max(worst.max_abs_error, r.max_abs_error);
    worst.checked += r.checked;
  }
  return worst;
}

}  // namespace relay
