#pragma once

#include <string>
#include <vector>

#include "relay/glora.hpp"

namespace relay {

template <typename Scalar>
struct AttentionWeights {
  Tensor<Scalar> norm_gamma, norm_beta;
  Tensor<Scalar> q_weight, q_bias;
  Tensor<Scalar> k_weight, k_bias;
  Tensor<Scalar> v_weight, v_bias;
  Tensor<Scalar> o_weight, o_bias;
};

/// One decoder layer: queries attend to the projected feature map, then to each other.
template <typename Scalar>
struct DecoderLayerParams {
  AttentionWeights<Scalar> cross;  // k/v lift d_low -> d
  AttentionWeights<Scalar> self;
};

template <typename Scalar>
struct DecoderParams {
  Tensor<Scalar> queries;  // [M_f, d]
  Tensor<Scalar> proj_weight, proj_bias;  // d -> d_low
  std::vector<DecoderLayerParams<Scalar>> layers;
  Tensor<Scalar> out_gamma, out_beta;
  Tensor<Scalar> mask_fc1_weight, mask_fc1_bias, mask_fc2_weight, mask_fc2_bias;  // d -> d -> d_low
  Tensor<Scalar> gate_fc1_weight, gate_fc1_bias, gate_fc2_weight, gate_fc2_bias;  // d -> d_low -> 1
};

namespace detail {

template <typename Scalar>
AttentionWeights<Scalar> init_attention(std::size_t d, std::size_t kv_in, CounterRng& rng) {
  AttentionWeights<Scalar> a;
  const double sq = 1.0 / std::sqrt(static_cast<double>(d));
  const double skv = 1.0 / std::sqrt(static_cast<double>(kv_in));
  a.norm_gamma = constant_tensor<Scalar>({d}, 1.0);
  a.norm_beta = constant_tensor<Scalar>({d}, 0.0);
  a.q_weight = random_tensor<Scalar>({d, d}, sq, rng);
  a.q_bias = constant_tensor<Scalar>({d}, 0.0);
  a.k_weight = random_tensor<Scalar>({d, kv_in}, skv, rng);
  a.k_bias = constant_tensor<Scalar>({d}, 0.0);
  a.v_weight = random_tensor<Scalar>({d, kv_in}, skv, rng);
  a.v_bias = constant_tensor<Scalar>({d}, 0.0);
  a.o_weight = random_tensor<Scalar>({d, d}, sq, rng);
  a.o_bias = constant_tensor<Scalar>({d}, 0.0);
  return a;
}

}  // namespace detail

template <typename Scalar>
DecoderParams<Scalar> init_decoder(const ModelConfig& cfg, CounterRng& rng) {
  cfg.validate();
  using detail::constant_tensor;
  using detail::random_tensor;
  const std::size_t d = cfg.dim, low = cfg.low_dim;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  DecoderParams<Scalar> p;
  p.queries = random_tensor<Scalar>({cfg.queries, d}, 1.0, rng);
  p.proj_weight = random_tensor<Scalar>({low, d}, sd, rng);
  p.proj_bias = constant_tensor<Scalar>({low}, 0.0);
  for (std::size_t k = 0; k < cfg.decoder_layers; ++k) {
    DecoderLayerParams<Scalar> layer;
    layer.cross = detail::init_attention<Scalar>(d, low, rng);
    layer.self = detail::init_attention<Scalar>(d, d, rng);
    p.layers.push_back(std::move(layer));
  }
  p.out_gamma = constant_tensor<Scalar>({d}, 1.0);
  p.out_beta = constant_tensor<Scalar>({d}, 0.0);
  p.mask_fc1_weight = random_tensor<Scalar>({d, d}, sd, rng);
  p.mask_fc1_bias = constant_tensor<Scalar>({d}, 0.0);
  p.mask_fc2_weight = random_tensor<Scalar>({low, d}, sd, rng);
  p.mask_fc2_bias = constant_tensor<Scalar>({low}, 0.0);
  p.gate_fc1_weight = random_tensor<Scalar>({low, d}, sd, rng);
  p.gate_fc1_bias = constant_tensor<Scalar>({low}, 0.0);
  p.gate_fc2_weight = random_tensor<Scalar>({1, low}, 1.0 / std::sqrt(static_cast<double>(low)), rng);
  p.gate_fc2_bias = constant_tensor<Scalar>({1}, 0.0);
  return p;
}

template <typename Scalar, typename F>
void visit_parameters(const DecoderParams<Scalar>& p, F&& f) {
  const auto g = ParamGroup::added;
  const auto attn = [&](const std::string& pre, const AttentionWeights<Scalar>& a) {
    f(pre + ".norm.gamma", a.norm_gamma, g);
    f(pre + ".norm.beta", a.norm_beta, g);
    f(pre + ".q.weight", a.q_weight, g);
    f(pre + ".q.bias", a.q_bias, g);
    f(pre + ".k.weight", a.k_weight, g);
    f(pre + ".k.bias", a.k_bias, g);
    f(pre + ".v.weight", a.v_weight, g);
    f(pre + ".v.bias", a.v_bias, g);
    f(pre + ".o.weight", a.o_weight, g);
    f(pre + ".o.bias", a.o_bias, g);
  };
  f("decoder.queries", p.queries, g);
  f("decoder.proj.weight", p.proj_weight, g);
  f("decoder.proj.bias", p.proj_bias, g);
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    const std::string pre = "decoder.layers." + std::to_string(k);
    attn(pre + ".cross", p.layers[k].cross);
    attn(pre + ".self", p.layers[k].self);
  }
  f("decoder.out_norm.gamma", p.out_gamma, g);
  f("decoder.out_norm.beta", p.out_beta, g);
  f("decoder.mask_mlp.fc1.weight", p.mask_fc1_weight, g);
  f("decoder.mask_mlp.fc1.bias", p.mask_fc1_bias, g);
  f("decoder.mask_mlp.fc2.weight", p.mask_fc2_weight, g);
  f("decoder.mask_mlp.fc2.bias", p.mask_fc2_bias, g);
  f("decoder.gate_mlp.fc1.weight", p.gate_fc1_weight, g);
  f("decoder.gate_mlp.fc1.bias", p.gate_fc1_bias, g);
  f("decoder.gate_mlp.fc2.weight", p.gate_fc2_weight, g);
  f("decoder.gate_mlp.fc2.bias", p.gate_fc2_bias, g);
}

/// Per-cell projection F[T, H_f, W_f, d] -> [T, H_f, W_f, d_low].
template <typename Scalar>
Tensor<Scalar> project_features(const Tensor<Scalar>& features, const DecoderParams<Scalar>& dec) {
  return linear(features, dec.proj_weight, dec.proj_bias);
}

/// Pre-norm attention residual: queries[B, Mq, d] attend to context[B, S, kv_in].
/// With `context` undefined the queries attend to themselves.
template <typename Scalar>
Tensor<Scalar> attention_residual(const Tensor<Scalar>& queries, const Tensor<Scalar>& context,
                                  const AttentionWeights<Scalar>& w, std::size_t heads, const RotaryTable* rope) {
  const auto h = layer_norm(queries, w.norm_gamma, w.norm_beta);
  const auto& kv = context.defined() ? context : h;
  auto q = split_heads(linear(h, w.q_weight, w.q_bias), heads);
  auto k = split_heads(linear(kv, w.k_weight, w.k_bias), heads);
  const auto v = split_heads(linear(kv, w.v_weight, w.v_bias), heads);
  if (rope) {
    q = rotary(q, *rope);
    k = rotary(k, *rope);
  }
  return add(queries, linear(merge_heads(scaled_dot_attention(q, k, v)), w.o_weight, w.o_bias));
}

inline RotaryTable query_rope_table(const ModelConfig& cfg) {
  std::vector<double> positions(cfg.queries);
  for (std::size_t j = 0; j < positions.size(); ++j) positions[j] = static_cast<double>(j);
  return rope_table_1d(positions, cfg.head_dim(), cfg.rope_base);
}

/// Cross-attention of queries[B, M_f, d] over cells[B, S, d_low], then query
/// self-attention with 1D rotary over the query index.
template <typename Scalar>
Tensor<Scalar> decoder_layer(const Tensor<Scalar>& queries, const Tensor<Scalar>& cells,
                             const DecoderLayerParams<Scalar>& layer, const ModelConfig& cfg) {
  if (cells.ndim() != 3 || cells.dim(1) == 0) throw ShapeError("decoder_layer: empty feature map");
  if (queries.ndim() != 3 || queries.dim(0) != cells.dim(0) || queries.dim(1) != cfg.queries) {
    throw ShapeError("decoder_layer: queries " + to_string(queries.shape()) + " vs cells " + to_string(cells.shape()));
  }
  const auto rope = query_rope_table(cfg);
  const auto crossed = attention_residual(queries, cells, layer.cross, cfg.heads, nullptr);
  return attention_residual(crossed, Tensor<Scalar>{}, layer.self, cfg.heads, &rope);
}

/// Runs all K layers for cells[B, S, d_low] and applies the output norm.
template <typename Scalar>
Tensor<Scalar> decode_queries(const Tensor<Scalar>& cells, const DecoderParams<Scalar>& dec, const ModelConfig& cfg) {
  auto q = expand(dec.queries, Shape{cells.dim(0), cfg.queries, cfg.dim});
  for (const auto& layer : dec.layers) q = decoder_layer(q, cells, layer, cfg);
  return layer_norm(q, dec.out_gamma, dec.out_beta);
}

/// logit(t, s) = sum_j sigmoid(g_j) <mask_embed(q_j), cell(t, s)>.
/// cells: [T, S, d_low]; queries: [1 or T, M_f, d]. Returns [T, S].
template <typename Scalar>
Tensor<Scalar> mask_logits(const Tensor<Scalar>& cells, const Tensor<Scalar>& queries, const DecoderParams<Scalar>& dec) {
  const auto embed = linear(gelu(linear(queries, dec.mask_fc1_weight, dec.mask_fc1_bias)), dec.mask_fc2_weight,
                            dec.mask_fc2_bias);
  const auto gate = sigmoid(
      linear(gelu(linear(queries, dec.gate_fc1_weight, dec.gate_fc1_bias)), dec.gate_fc2_weight, dec.gate_fc2_bias));
  const auto maps = matmul(cells, transpose(embed));  // [T, S, M_f]
  const auto logits = matmul(maps, gate);             // [T, S, 1]
  return reshape(logits, Shape{cells.dim(0), cells.dim(1)});
}

/// Mask logits [T, H_f, W_f] for reassembled features F[T, H_f, W_f, d].
/// In one-shot mode the K layers run on frame 0 only and the resulting
/// queries decode every frame; otherwise each frame is decoded independently.
template <typename Scalar>
Tensor<Scalar> decode_masks(const Tensor<Scalar>& features, const DecoderParams<Scalar>& dec, const ModelConfig& cfg,
                            bool one_shot) {
  if (features.ndim() != 4 || features.dim(0) == 0) throw ShapeError("decode_masks: need features [T, H_f, W_f, d]");
  const std::size_t t = features.dim(0), hf = features.dim(1), wf = features.dim(2);
  const auto cells = reshape(project_features(features, dec), Shape{t, hf * wf, cfg.low_dim});
  const auto queries = one_shot ? decode_queries(slice(cells, 0, 0, 1), dec, cfg) : decode_queries(cells, dec, cfg);
  return reshape(mask_logits(cells, queries, dec), Shape{t, hf, wf});
}

}  // namespace relay
