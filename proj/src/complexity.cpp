#include "relay/complexity.hpp"

#include "relay/tiling.hpp"

namespace relay {

GloraGeometry GloraGeometry::from(const ModelConfig& cfg, std::size_t units) {
  GloraGeometry g;
  g.units = units;
  g.patch_tokens = cfg.tokens_per_unit();
  g.relay_tokens = cfg.grt_count;
  g.dim = cfg.dim;
  g.layers = cfg.layers;
  g.heads = cfg.heads;
  g.mlp_dim = cfg.mlp_dim;
  g.lora_rank = cfg.lora_rank;
  g.global_relay = cfg.global_relay;
  return g;
}

namespace {

using u64 = std::uint64_t;

// One pre-norm self-attention residual over `rows` tokens split into
// sequences of length `seq`, with adapted q/k/v/o projections.
u64 attention_block(u64 rows, u64 seq, u64 d, u64 h, u64 r) {
  const u64 norm = rows * d;
  const u64 proj = 4 * rows * d * d + (r > 0 ? 4 * 2 * rows * d * r : 0);
  const u64 scores = rows * seq * d;
  const u64 softmax = h * rows * seq;
  const u64 mixing = rows * seq * d;
  return norm + proj + scores + softmax + mixing;
}

}  // namespace

std::uint64_t glora_global_quadratic_cost(const GloraGeometry& g) {
  if (g.relay_tokens == 0 || !g.global_relay) return 0;
  const u64 tokens = g.units * g.relay_tokens;
  return g.layers * (2 * tokens * tokens * g.dim + g.heads * tokens * tokens);
}

std::uint64_t glora_cost(const GloraGeometry& g) {
  const u64 d = g.dim, seq = g.patch_tokens + g.relay_tokens;
  const u64 rows = g.units * seq;
  u64 per_layer = attention_block(rows, seq, d, g.heads, g.lora_rank);
  per_layer += rows * d + 2 * rows * d * g.mlp_dim + rows * g.mlp_dim;  // norm, fc1+fc2, gelu
  if (g.relay_tokens > 0 && g.global_relay) {
    const u64 tokens = g.units * g.relay_tokens;
    per_layer += attention_block(tokens, tokens, d, g.heads, g.lora_rank);
  }
  return g.layers * per_layer;
}

DecoderCost decoder_flops(std::size_t frames, std::size_t feature_h, std::size_t feature_w, const ModelConfig& cfg) {
  const u64 s = feature_h * feature_w, q = cfg.queries, d = cfg.dim, low = cfg.low_dim, h = cfg.heads;
  const u64 cross = q * d + q * d * d + 2 * s * low * d + q * s * d + h * q * s + q * s * d + q * d * d;
  const u64 self = q * d + 4 * q * d * d + q * q * d + h * q * q + q * q * d;
  const u64 heads = q * d                                   // output norm
                    + q * d * d + q * d + q * d * low       // mask embedding MLP
                    + q * d * low + q * low + q * low;      // gating MLP
  DecoderCost c;
  c.query_macs = cfg.decoder_layers * (cross + self) + heads;
  c.frame_macs = s * d * low + s * low * q + s * q;
  c.one_shot = c.query_macs + frames * c.frame_macs;
  c.per_frame = frames * c.query_macs + frames * c.frame_macs;
  return c;
}

ParamCount param_count(const ModelConfig& cfg) {
  const u64 d = cfg.dim, ff = cfg.mlp_dim, r = cfg.lora_rank, low = cfg.low_dim, q = cfg.queries;
  ParamCount p;
  const u64 block = 2 * d + 4 * (d * d + d) + 2 * d + (ff * d + ff) + (d * ff + d);
  p.backbone = d * cfg.patch_dim() + d + cfg.tokens_per_unit() * d + cfg.layers * block + 2 * d;

  const u64 lora = r > 0 ? cfg.layers * 4 * 2 * (r * d + d * r) : 0;
  const u64 relays = cfg.grt_count * d;
  const u64 cross = 2 * d + (d * d + d) + 2 * (d * low + d) + (d * d + d);
  const u64 self = 2 * d + 4 * (d * d + d);
  const u64 decoder = q * d + (low * d + low) + cfg.decoder_layers * (cross + self) + 2 * d +
                      (d * d + d) + (low * d + low) + (low * d + low) + (low + 1);
  p.added = lora + relays + decoder;
  return p;
}

CostReport cost_report(const ModelConfig& cfg, std::size_t height, std::size_t width, std::size_t frames) {
  const UnitGrid grid = compute_unit_grid(height, width, cfg.unit_size, frames);
  const auto [hf, wf] = feature_extent(grid, cfg.patch_side);
  CostReport r;
  r.frame_h = height;
  r.frame_w = width;
  r.frames = frames;
  r.units = grid.total_units();
  const auto g = GloraGeometry::from(cfg, r.units);
  r.patch_embed_macs = static_cast<u64>(r.units) * cfg.tokens_per_unit() * cfg.patch_dim() * cfg.dim;
  r.glora_macs = glora_cost(g);
  r.final_norm_macs = static_cast<u64>(r.units) * cfg.tokens_per_unit() * cfg.dim;
  r.glora_global_quadratic_macs = glora_global_quadratic_cost(g);
  const auto dec = decoder_flops(frames, hf, wf, cfg);
  r.decoder_one_shot_macs = dec.one_shot;
  r.decoder_per_frame_macs = dec.per_frame;
  r.total_macs = r.patch_embed_macs + r.glora_macs + r.final_norm_macs + r.decoder_one_shot_macs;
  r.params = param_count(cfg);
  return r;
}

void to_json(nlohmann::json& j, const CostReport& r) {
  j = nlohmann::json{
      {"input", {{"height", r.frame_h}, {"width", r.frame_w}, {"frames", r.frames}, {"units", r.units}}},
      {"macs",
       {{"patch_embed", r.patch_embed_macs},
        {"glora", r.glora_macs},
        {"glora_global_quadratic", r.glora_global_quadratic_macs},
        {"final_norm", r.final_norm_macs},
        {"decoder_one_shot", r.decoder_one_shot_macs},
        {"decoder_per_frame", r.decoder_per_frame_macs},
        {"total", r.total_macs}}},
      {"flops", r.flops()},
      {"gflops", static_cast<double>(r.flops()) * 1e-9},
      {"params",
       {{"backbone", r.params.backbone}, {"added", r.params.added}, {"overhead", r.params.overhead()}}},
  };
}

}  // namespace relay
