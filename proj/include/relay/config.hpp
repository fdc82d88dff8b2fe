#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "json.hpp"

namespace relay {

/// Architecture hyperparameters shared by the backbone and the decoder.
struct ModelConfig {
  std::size_t channels = 3;
  std::size_t patch_side = 16;
  std::size_t unit_size = 64;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t layers = 4;
  std::size_t mlp_dim = 256;
  std::size_t grt_count = 2;
  std::size_t lora_rank = 8;
  double lora_alpha = 16.0;
  double rope_base = 10000.0;
  std::size_t queries = 8;
  std::size_t decoder_layers = 3;
  std::size_t low_dim = 32;
  bool global_relay = true;
  std::size_t max_side = 1024;
  /// Pixels are mapped to (v - input_mean) / input_std before tiling.
  double input_mean = 0.5;
  double input_std = 0.25;

  std::size_t head_dim() const { return dim / heads; }
  std::size_t cells_per_side() const { return unit_size / patch_side; }
  std::size_t tokens_per_unit() const { return cells_per_side() * cells_per_side(); }
  std::size_t patch_dim() const { return patch_side * patch_side * channels; }
  double lora_scaling() const { return lora_rank == 0 ? 0.0 : lora_alpha / static_cast<double>(lora_rank); }

  /// Throws ShapeError describing the first violated constraint.
  void validate() const;
};

struct OptimConfig {
  double lr = 1e-4;
  double min_lr = 5e-7;
  std::size_t warmup_steps = 0;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t accumulation_steps = 8;
  /// Global gradient-norm clip applied before each update; 0 disables.
  double grad_clip = 1.0;
};

struct DataConfig {
  std::size_t samples = 16;
  std::size_t height = 128;
  std::size_t width = 128;
  std::size_t clip_len = 1;
  /// Manipulated rectangles have corners on multiples of this many pixels.
  std::size_t align = 1;
  std::size_t min_rect = 24;
  std::size_t max_rect = 56;
  bool flips = false;
  std::uint64_t seed = 42;
};

struct RunConfig {
  ModelConfig model;
  OptimConfig optim;
  DataConfig data;
  double edge_lambda = 20.0;
  std::size_t edge_width = 7;
  std::size_t steps = 500;
  bool freeze_backbone_first_epoch = false;
  std::uint64_t seed = 42;
  std::size_t threads = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const OptimConfig& c);
void from_json(const nlohmann::json& j, OptimConfig& c);
void to_json(nlohmann::json& j, const DataConfig& c);
void from_json(const nlohmann::json& j, DataConfig& c);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& config, const std::string& path);

}  // namespace relay
