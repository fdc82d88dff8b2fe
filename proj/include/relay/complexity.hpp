#pragma once

#include <cstdint>

#include "relay/config.hpp"

namespace relay {

/// Geometry of the attention work in the relay backbone.
struct GloraGeometry {
  std::size_t units = 1;            // M
  std::size_t patch_tokens = 16;    // N
  std::size_t relay_tokens = 2;     // n
  std::size_t dim = 64;             // d
  std::size_t layers = 4;           // L
  std::size_t heads = 4;            // h
  std::size_t mlp_dim = 256;
  std::size_t lora_rank = 8;
  bool global_relay = true;

  static GloraGeometry from(const ModelConfig& cfg, std::size_t units);
};

/// Multiply-accumulates of L relay blocks. Attention terms are
/// 2*L*M*(N+n)^2*d locally and 2*L*(M*n)^2*d globally; the rest are
/// projections, the MLP, and d-linear softmax/norm/activation costs.
std::uint64_t glora_cost(const GloraGeometry& g);

/// The quadratic-in-(M*n) part of glora_cost (global scores, softmax, mixing).
std::uint64_t glora_global_quadratic_cost(const GloraGeometry& g);

struct DecoderCost {
  std::uint64_t query_macs = 0;  // K layers + query heads, for one query set
  std::uint64_t frame_macs = 0;  // projection and mask product, per frame
  std::uint64_t one_shot = 0;
  std::uint64_t per_frame = 0;

  /// Fraction of per-frame decoding cost removed by one-shot decoding.
  double savings() const {
    return per_frame == 0 ? 0.0 : 1.0 - static_cast<double>(one_shot) / static_cast<double>(per_frame);
  }
};

DecoderCost decoder_flops(std::size_t frames, std::size_t feature_h, std::size_t feature_w, const ModelConfig& cfg);

struct ParamCount {
  std::uint64_t backbone = 0;
  std::uint64_t added = 0;  // LoRA + relay tokens + decoder

  double overhead() const { return backbone == 0 ? 0.0 : static_cast<double>(added) / static_cast<double>(backbone); }
};

ParamCount param_count(const ModelConfig& cfg);

/// Analytic cost of a full forward pass. MACs are reported as-is and FLOPs
/// as 2 * MACs.
struct CostReport {
  std::size_t frame_h = 0, frame_w = 0, frames = 1;
  std::size_t units = 0;
  std::uint64_t patch_embed_macs = 0;
  std::uint64_t glora_macs = 0;
  std::uint64_t glora_global_quadratic_macs = 0;
  std::uint64_t final_norm_macs = 0;
  std::uint64_t decoder_one_shot_macs = 0;
  std::uint64_t decoder_per_frame_macs = 0;
  std::uint64_t total_macs = 0;  // patch embed + glora + final norm + one-shot decoder
  ParamCount params;

  std::uint64_t flops() const { return 2 * total_macs; }
};

CostReport cost_report(const ModelConfig& cfg, std::size_t height, std::size_t width, std::size_t frames);

void to_json(nlohmann::json& j, const CostReport& r);

}  // namespace relay
