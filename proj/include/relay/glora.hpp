#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "relay/config.hpp"
#include "relay/ops.hpp"
#include "relay/rng.hpp"
#include "relay/rope.hpp"
#include "relay/tiling.hpp"

namespace relay {

enum class AdapterMode { local, global };

/// Whether a parameter belongs to the base transformer or was added on top
/// of it (adapters, relay tokens, mask decoder).
enum class ParamGroup { backbone, added };

/// Low-rank delta up * down over a shared base weight; `down` is [r, in],
/// `up` is [out, r]. Undefined tensors mean rank 0.
template <typename Scalar>
struct LoraAdapter {
  Tensor<Scalar> down;
  Tensor<Scalar> up;

  bool enabled() const { return down.defined(); }
};

template <typename Scalar>
struct AdaptedLinear {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;
  LoraAdapter<Scalar> local;
  LoraAdapter<Scalar> global;

  const LoraAdapter<Scalar>& adapter(AdapterMode mode) const { return mode == AdapterMode::local ? local : global; }
};

template <typename Scalar>
struct GloraBlockParams {
  Tensor<Scalar> norm1_gamma, norm1_beta;
  AdaptedLinear<Scalar> q, k, v, o;
  Tensor<Scalar> norm2_gamma, norm2_beta;
  Tensor<Scalar> fc1_weight, fc1_bias, fc2_weight, fc2_bias;
};

template <typename Scalar>
struct BackboneParams {
  Tensor<Scalar> patch_weight, patch_bias;
  Tensor<Scalar> pos_embed;
  Tensor<Scalar> relay_tokens;  // [n, d]; undefined when n == 0
  std::vector<GloraBlockParams<Scalar>> blocks;
  Tensor<Scalar> final_gamma, final_beta;
};

/// Patch tokens and relay tokens for `samples` clips that share one unit
/// count; unit axis is sample-major.
template <typename Scalar>
struct GloraState {
  Tensor<Scalar> patches;  // [B*M, N, d]
  Tensor<Scalar> relays;   // [B*M, n, d]; undefined when n == 0
  std::size_t samples = 1;
  std::size_t layer = 0;
};

// ---------------------------------------------------------------------------
// Initialization and parameter enumeration

namespace detail {

template <typename Scalar>
Tensor<Scalar> random_tensor(Shape shape, double stddev, CounterRng& rng) {
  std::vector<Scalar> values(numel(shape));
  for (auto& v : values) v = static_cast<Scalar>(stddev * rng.normal());
  return Tensor<Scalar>(std::move(shape), std::move(values), true);
}

template <typename Scalar>
Tensor<Scalar> constant_tensor(Shape shape, double value) {
  return Tensor<Scalar>(std::move(shape), std::vector<Scalar>(numel(shape), static_cast<Scalar>(value)), true);
}

template <typename Scalar>
AdaptedLinear<Scalar> init_adapted(std::size_t d, std::size_t rank, CounterRng& rng) {
  AdaptedLinear<Scalar> lin;
  lin.weight = random_tensor<Scalar>({d, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  lin.bias = constant_tensor<Scalar>({d}, 0.0);
  if (rank > 0) {
    for (auto* a : {&lin.local, &lin.global}) {
      a->down = random_tensor<Scalar>({rank, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
      a->up = constant_tensor<Scalar>({d, rank}, 0.0);
    }
  }
  return lin;
}

}  // namespace detail

template <typename Scalar>
BackboneParams<Scalar> init_backbone(const ModelConfig& cfg, CounterRng& rng) {
  cfg.validate();
  using detail::constant_tensor;
  using detail::random_tensor;
  const std::size_t d = cfg.dim;
  BackboneParams<Scalar> p;
  p.patch_weight = random_tensor<Scalar>({d, cfg.patch_dim()}, 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim())), rng);
  p.patch_bias = constant_tensor<Scalar>({d}, 0.0);
  p.pos_embed = random_tensor<Scalar>({cfg.tokens_per_unit(), d}, 0.02, rng);
  if (cfg.grt_count > 0) p.relay_tokens = random_tensor<Scalar>({cfg.grt_count, d}, 0.02, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    GloraBlockParams<Scalar> b;
    b.norm1_gamma = constant_tensor<Scalar>({d}, 1.0);
    b.norm1_beta = constant_tensor<Scalar>({d}, 0.0);
    b.q = detail::init_adapted<Scalar>(d, cfg.lora_rank, rng);
    b.k = detail::init_adapted<Scalar>(d, cfg.lora_rank, rng);
    b.v = detail::init_adapted<Scalar>(d, cfg.lora_rank, rng);
    b.o = detail::init_adapted<Scalar>(d, cfg.lora_rank, rng);
    b.norm2_gamma = constant_tensor<Scalar>({d}, 1.0);
    b.norm2_beta = constant_tensor<Scalar>({d}, 0.0);
    b.fc1_weight = random_tensor<Scalar>({cfg.mlp_dim, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    b.fc1_bias = constant_tensor<Scalar>({cfg.mlp_dim}, 0.0);
    b.fc2_weight = random_tensor<Scalar>({d, cfg.mlp_dim}, 1.0 / std::sqrt(static_cast<double>(cfg.mlp_dim)), rng);
    b.fc2_bias = constant_tensor<Scalar>({d}, 0.0);
    p.blocks.push_back(std::move(b));
  }
  p.final_gamma = constant_tensor<Scalar>({d}, 1.0);
  p.final_beta = constant_tensor<Scalar>({d}, 0.0);
  return p;
}

/// Calls f(name, tensor, group) for every parameter in a fixed order.
template <typename Scalar, typename F>
void visit_parameters(const BackboneParams<Scalar>& p, F&& f) {
  const auto adapted = [&](const std::string& prefix, const AdaptedLinear<Scalar>& lin) {
    f(prefix + ".weight", lin.weight, ParamGroup::backbone);
    f(prefix + ".bias", lin.bias, ParamGroup::backbone);
    if (lin.local.enabled()) {
      f(prefix + ".lora_local.down", lin.local.down, ParamGroup::added);
      f(prefix + ".lora_local.up", lin.local.up, ParamGroup::added);
    }
    if (lin.global.enabled()) {
      f(prefix + ".lora_global.down", lin.global.down, ParamGroup::added);
      f(prefix + ".lora_global.up", lin.global.up, ParamGroup::added);
    }
  };
  f("backbone.patch_embed.weight", p.patch_weight, ParamGroup::backbone);
  f("backbone.patch_embed.bias", p.patch_bias, ParamGroup::backbone);
  f("backbone.pos_embed", p.pos_embed, ParamGroup::backbone);
  if (p.relay_tokens.defined()) f("backbone.relay_tokens", p.relay_tokens, ParamGroup::added);
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    const auto& b = p.blocks[l];
    const std::string pre = "backbone.blocks." + std::to_string(l);
    f(pre + ".norm1.gamma", b.norm1_gamma, ParamGroup::backbone);
    f(pre + ".norm1.beta", b.norm1_beta, ParamGroup::backbone);
    adapted(pre + ".attn.q", b.q);
    adapted(pre + ".attn.k", b.k);
    adapted(pre + ".attn.v", b.v);
    adapted(pre + ".attn.o", b.o);
    f(pre + ".norm2.gamma", b.norm2_gamma, ParamGroup::backbone);
    f(pre + ".norm2.beta", b.norm2_beta, ParamGroup::backbone);
    f(pre + ".mlp.fc1.weight", b.fc1_weight, ParamGroup::backbone);
    f(pre + ".mlp.fc1.bias", b.fc1_bias, ParamGroup::backbone);
    f(pre + ".mlp.fc2.weight", b.fc2_weight, ParamGroup::backbone);
    f(pre + ".mlp.fc2.bias", b.fc2_bias, ParamGroup::backbone);
  }
  f("backbone.final_norm.gamma", p.final_gamma, ParamGroup::backbone);
  f("backbone.final_norm.beta", p.final_beta, ParamGroup::backbone);
}

// ---------------------------------------------------------------------------
// Forward pieces

/// y = x (W + scaling * up * down)^T + b, evaluated without materializing the delta.
template <typename Scalar>
Tensor<Scalar> lora_linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias,
                           const LoraAdapter<Scalar>& adapter, double scaling) {
  Tensor<Scalar> y = linear(x, weight, bias);
  if (!adapter.enabled()) return y;
  if (adapter.down.ndim() != 2 || adapter.up.ndim() != 2 || adapter.down.dim(0) == 0 ||
      adapter.down.dim(0) != adapter.up.dim(1) || adapter.down.dim(1) != weight.dim(1) ||
      adapter.up.dim(0) != weight.dim(0)) {
    throw ShapeError("lora_linear: adapter " + to_string(adapter.down.shape()) + "/" + to_string(adapter.up.shape()) +
                     " incompatible with weight " + to_string(weight.shape()));
  }
  return add(y, scale(linear(linear(x, adapter.down), adapter.up), static_cast<Scalar>(scaling)));
}

template <typename Scalar>
Tensor<Scalar> lora_linear(const Tensor<Scalar>& x, const AdaptedLinear<Scalar>& lin, AdapterMode mode,
                           double scaling) {
  return lora_linear(x, lin.weight, lin.bias, lin.adapter(mode), scaling);
}

/// [B, S, h*dh] -> [B, h, S, dh]
template <typename Scalar>
Tensor<Scalar> split_heads(const Tensor<Scalar>& x, std::size_t heads) {
  const std::size_t b = x.dim(0), s = x.dim(1), d = x.dim(2);
  if (d % heads != 0) throw ShapeError("split_heads: width not divisible by head count");
  return permute(reshape(x, Shape{b, s, heads, d / heads}), {0, 2, 1, 3});
}

/// [B, h, S, dh] -> [B, S, h*dh]
template <typename Scalar>
Tensor<Scalar> merge_heads(const Tensor<Scalar>& x) {
  const std::size_t b = x.dim(0), h = x.dim(1), s = x.dim(2), dh = x.dim(3);
  return reshape(permute(x, {0, 2, 1, 3}), Shape{b, s, h * dh});
}

/// softmax(q k^T / sqrt(dh)) v over per-head tensors [B, h, S, dh].
template <typename Scalar>
Tensor<Scalar> scaled_dot_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v) {
  const Scalar inv = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(q.dim(-1))));
  return matmul(softmax_rows(matmul(scale(q, inv), transpose(k))), v);
}

/// Pre-norm multi-head self-attention residual over x[B, S, d], optionally
/// rotating queries and keys.
template <typename Scalar>
Tensor<Scalar> self_attention_residual(const Tensor<Scalar>& x, const GloraBlockParams<Scalar>& block,
                                       const ModelConfig& cfg, AdapterMode mode, const RotaryTable* rope) {
  const double s = cfg.lora_scaling();
  const auto h = layer_norm(x, block.norm1_gamma, block.norm1_beta);
  auto q = split_heads(lora_linear(h, block.q, mode, s), cfg.heads);
  auto k = split_heads(lora_linear(h, block.k, mode, s), cfg.heads);
  const auto v = split_heads(lora_linear(h, block.v, mode, s), cfg.heads);
  if (rope) {
    q = rotary(q, *rope);
    k = rotary(k, *rope);
  }
  return add(x, lora_linear(merge_heads(scaled_dot_attention(q, k, v)), block.o, mode, s));
}

/// Per-unit attention over [GRTs; patches] (local adapters) followed by the
/// MLP residual. tokens: [units, n + N, d].
template <typename Scalar>
Tensor<Scalar> local_attention(const Tensor<Scalar>& tokens, const GloraBlockParams<Scalar>& block,
                               const ModelConfig& cfg) {
  if (tokens.ndim() != 3 || tokens.dim(2) != cfg.dim) {
    throw ShapeError("local_attention: tokens " + to_string(tokens.shape()) + " do not match config");
  }
  auto x = self_attention_residual(tokens, block, cfg, AdapterMode::local, nullptr);
  const auto h = layer_norm(x, block.norm2_gamma, block.norm2_beta);
  return add(x, linear(gelu(linear(h, block.fc1_weight, block.fc1_bias)), block.fc2_weight, block.fc2_bias));
}

/// Global attention over all relay tokens of each sample (global adapters,
/// 4D rotary on queries and keys). relays: [B*M, n, d]; `rope` has seq = M*n.
template <typename Scalar>
Tensor<Scalar> global_relay_attention(const Tensor<Scalar>& relays, std::size_t samples, const RotaryTable& rope,
                                      const GloraBlockParams<Scalar>& block, const ModelConfig& cfg) {
  if (relays.ndim() != 3 || samples == 0 || relays.dim(0) % samples != 0) {
    throw ShapeError("global_relay_attention: relays " + to_string(relays.shape()) + " inconsistent with batch");
  }
  const std::size_t per_sample = relays.dim(0) / samples * relays.dim(1);
  if (rope.seq != per_sample || (rope.batch != 1 && rope.batch != samples)) {
    throw ShapeError("global_relay_attention: position table inconsistent with M*n");
  }
  const auto flat = reshape(relays, Shape{samples, per_sample, relays.dim(2)});
  return reshape(self_attention_residual(flat, block, cfg, AdapterMode::global, &rope), relays.shape());
}

/// Relay positions for a grid, unit-major then relay slot.
inline std::vector<TokenPosition> relay_positions(const UnitGrid& grid, std::size_t relays_per_unit) {
  std::vector<TokenPosition> out;
  out.reserve(grid.total_units() * relays_per_unit);
  for (std::size_t u = 0; u < grid.total_units(); ++u) {
    const auto c = grid.coord(u);
    for (std::size_t s = 0; s < relays_per_unit; ++s) out.push_back({s, c.col, c.row, c.t});
  }
  return out;
}

inline RotaryTable relay_rope_table(const UnitGrid& grid, const ModelConfig& cfg) {
  return rope_table_4d(relay_positions(grid, cfg.grt_count), RopeConfig::equal_split(cfg.head_dim(), cfg.rope_base));
}

/// Local attention on every unit, then relay exchange across units.
/// Patch tokens carry only the local update; relay tokens carry both.
template <typename Scalar>
GloraState<Scalar> glora_block(const GloraState<Scalar>& state, const GloraBlockParams<Scalar>& block,
                               const ModelConfig& cfg, const RotaryTable& rope) {
  GloraState<Scalar> next = state;
  ++next.layer;
  const std::size_t n = state.relays.defined() ? state.relays.dim(1) : 0;
  if (n == 0) {
    next.patches = local_attention(state.patches, block, cfg);
    return next;
  }
  const std::size_t patches = state.patches.dim(1);
  const auto tokens = local_attention(concat<Scalar>({state.relays, state.patches}, 1), block, cfg);
  next.relays = slice(tokens, 1, 0, n);
  next.patches = slice(tokens, 1, n, patches);
  if (cfg.global_relay) next.relays = global_relay_attention(next.relays, state.samples, rope, block, cfg);
  return next;
}

/// Embeds patch vectors [B*M, N, patch_dim], broadcasts the relay tokens to
/// every unit and runs all blocks. Returns the final patch and relay tokens;
/// the closing norm is applied by the caller (see final_norm).
template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> backbone_forward(const Tensor<Scalar>& patch_vectors, std::size_t samples,
                                                           const RotaryTable& rope, const BackboneParams<Scalar>& params,
                                                           const ModelConfig& cfg) {
  if (patch_vectors.ndim() != 3 || patch_vectors.dim(1) != cfg.tokens_per_unit() ||
      patch_vectors.dim(2) != cfg.patch_dim()) {
    throw ShapeError("backbone_forward: patches " + to_string(patch_vectors.shape()) + " do not match config");
  }
  GloraState<Scalar> state;
  state.samples = samples;
  state.patches = add(linear(patch_vectors, params.patch_weight, params.patch_bias), params.pos_embed);
  if (params.relay_tokens.defined()) {
    state.relays = expand(params.relay_tokens, Shape{patch_vectors.dim(0), cfg.grt_count, cfg.dim});
  }
  for (const auto& block : params.blocks) state = glora_block(state, block, cfg, rope);
  return {state.patches, state.relays};
}

template <typename Scalar>
Tensor<Scalar> final_norm(const Tensor<Scalar>& patches, const BackboneParams<Scalar>& params) {
  return layer_norm(patches, params.final_gamma, params.final_beta);
}

}  // namespace relay
