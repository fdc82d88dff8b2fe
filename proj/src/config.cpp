#include "relay/config.hpp"

#include <fstream>
#include <stdexcept>

#include "relay/rope.hpp"

namespace relay {

void ModelConfig::validate() const {
  const auto fail = [](const std::string& what) { throw ShapeError("model config: " + what); };
  if (channels == 0 || patch_side == 0 || unit_size == 0 || dim == 0 || heads == 0) {
    fail("extents must be positive");
  }
  if (unit_size % patch_side != 0) fail("unit_size must be a multiple of patch_side");
  if (dim % heads != 0) fail("dim must be divisible by heads");
  if (mlp_dim == 0) fail("mlp_dim must be positive");
  RopeConfig::equal_split(head_dim(), rope_base).validate();
  if (queries == 0) fail("queries must be positive");
  if (low_dim == 0 || low_dim >= dim) fail("low_dim must be in [1, dim)");
  if (lora_rank > 0 && lora_alpha <= 0) fail("lora_alpha must be positive");
  if (max_side == 0) fail("max_side must be positive");
  if (!(input_std > 0)) fail("input_std must be positive");
}

void RunConfig::validate() const {
  model.validate();
  const auto fail = [](const std::string& what) { throw ShapeError("run config: " + what); };
  if (optim.lr < 0 || optim.min_lr < 0 || optim.min_lr > optim.lr) fail("need 0 <= min_lr <= lr");
  if (optim.accumulation_steps == 0) fail("accumulation_steps must be positive");
  if (optim.grad_clip < 0) fail("grad_clip must be non-negative");
  if (data.samples == 0 || data.height == 0 || data.width == 0 || data.clip_len == 0) fail("data extents must be positive");
  if (data.height > model.max_side || data.width > model.max_side) fail("data resolution exceeds max_side");
  if (data.align == 0 || data.min_rect == 0 || data.min_rect > data.max_rect) fail("invalid rectangle sizes");
  if (data.max_rect > data.height || data.max_rect > data.width) fail("max_rect exceeds frame");
  if (edge_lambda < 0) fail("edge_lambda must be non-negative");
  if (edge_width == 0) fail("edge_width must be positive");
  if (threads != 1) fail("only single-threaded execution is supported");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"channels", c.channels},     {"patch_side", c.patch_side},
                     {"unit_size", c.unit_size},   {"dim", c.dim},
                     {"heads", c.heads},           {"layers", c.layers},
                     {"mlp_dim", c.mlp_dim},       {"grt_count", c.grt_count},
                     {"lora_rank", c.lora_rank},   {"lora_alpha", c.lora_alpha},
                     {"rope_base", c.rope_base},   {"queries", c.queries},
                     {"decoder_layers", c.decoder_layers}, {"low_dim", c.low_dim},
                     {"global_relay", c.global_relay},     {"max_side", c.max_side},
                     {"input_mean", c.input_mean},         {"input_std", c.input_std}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.channels = j.value("channels", d.channels);
  c.patch_side = j.value("patch_side", d.patch_side);
  c.unit_size = j.value("unit_size", d.unit_size);
  c.dim = j.value("dim", d.dim);
  c.heads = j.value("heads", d.heads);
  c.layers = j.value("layers", d.layers);
  c.mlp_dim = j.value("mlp_dim", 4 * c.dim);
  c.grt_count = j.value("grt_count", d.grt_count);
  c.lora_rank = j.value("lora_rank", d.lora_rank);
  c.lora_alpha = j.value("lora_alpha", d.lora_alpha);
  c.rope_base = j.value("rope_base", d.rope_base);
  c.queries = j.value("queries", d.queries);
  c.decoder_layers = j.value("decoder_layers", d.decoder_layers);
  c.low_dim = j.value("low_dim", c.dim / 2);
  c.global_relay = j.value("global_relay", d.global_relay);
  c.max_side = j.value("max_side", d.max_side);
  c.input_mean = j.value("input_mean", d.input_mean);
  c.input_std = j.value("input_std", d.input_std);
}

void to_json(nlohmann::json& j, const OptimConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"min_lr", c.min_lr},
                     {"warmup_steps", c.warmup_steps},
                     {"weight_decay", c.weight_decay},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"accumulation_steps", c.accumulation_steps},
                     {"grad_clip", c.grad_clip}};
}

void from_json(const nlohmann::json& j, OptimConfig& c) {
  OptimConfig d;
  c.lr = j.value("lr", d.lr);
  c.min_lr = j.value("min_lr", d.min_lr);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.accumulation_steps = j.value("accumulation_steps", d.accumulation_steps);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
}

void to_json(nlohmann::json& j, const DataConfig& c) {
  j = nlohmann::json{{"samples", c.samples},   {"height", c.height},     {"width", c.width},
                     {"clip_len", c.clip_len}, {"align", c.align},       {"min_rect", c.min_rect},
                     {"max_rect", c.max_rect}, {"flips", c.flips},       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DataConfig& c) {
  DataConfig d;
  c.samples = j.value("samples", d.samples);
  c.height = j.value("height", d.height);
  c.width = j.value("width", d.width);
  c.clip_len = j.value("clip_len", d.clip_len);
  c.align = j.value("align", d.align);
  c.min_rect = j.value("min_rect", d.min_rect);
  c.max_rect = j.value("max_rect", d.max_rect);
  c.flips = j.value("flips", d.flips);
  c.seed = j.value("seed", d.seed);
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"model", c.model},
                     {"optim", c.optim},
                     {"data", c.data},
                     {"edge_lambda", c.edge_lambda},
                     {"edge_width", c.edge_width},
                     {"steps", c.steps},
                     {"freeze_backbone_first_epoch", c.freeze_backbone_first_epoch},
                     {"seed", c.seed},
                     {"threads", c.threads}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  RunConfig d;
  c.model = j.contains("model") ? j.at("model").get<ModelConfig>() : d.model;
  c.optim = j.contains("optim") ? j.at("optim").get<OptimConfig>() : d.optim;
  c.data = j.contains("data") ? j.at("data").get<DataConfig>() : d.data;
  c.edge_lambda = j.value("edge_lambda", d.edge_lambda);
  c.edge_width = j.value("edge_width", d.edge_width);
  c.steps = j.value("steps", d.steps);
  c.freeze_backbone_first_epoch = j.value("freeze_backbone_first_epoch", d.freeze_backbone_first_epoch);
  c.seed = j.value("seed", d.seed);
  c.threads = j.value("threads", d.threads);
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  RunConfig c = nlohmann::json::parse(in).get<RunConfig>();
  c.validate();
  return c;
}

void save_run_config(const RunConfig& config, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write config " + path);
  out << nlohmann::json(config).dump(2) << "\n";
}

}  // namespace relay
