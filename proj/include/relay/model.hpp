#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "relay/decoder.hpp"
#include "relay/glora.hpp"

namespace relay {

/// Backbone plus mask decoder, templated on the scalar type.
template <typename Scalar>
struct RelayModel {
  ModelConfig config;
  BackboneParams<Scalar> backbone;
  DecoderParams<Scalar> decoder;

  static RelayModel init(const ModelConfig& config, std::uint64_t seed) {
    RelayModel m;
    m.config = config;
    CounterRng backbone_rng(seed, 1);
    CounterRng decoder_rng(seed, 2);
    m.backbone = init_backbone<Scalar>(config, backbone_rng);
    m.decoder = init_decoder<Scalar>(config, decoder_rng);
    return m;
  }

  struct NamedParameter {
    std::string name;
    Tensor<Scalar> tensor;
    ParamGroup group;
  };

  std::vector<NamedParameter> named_parameters() const {
    std::vector<NamedParameter> out;
    const auto collect = [&out](const std::string& name, const Tensor<Scalar>& t, ParamGroup g) {
      out.push_back({name, t, g});
    };
    visit_parameters(backbone, collect);
    visit_parameters(decoder, collect);
    return out;
  }

  std::vector<Tensor<Scalar>> parameters() const {
    std::vector<Tensor<Scalar>> out;
    for (auto& p : named_parameters()) out.push_back(p.tensor);
    return out;
  }
};

template <typename Scalar>
struct Prediction {
  UnitGrid grid;
  Tensor<Scalar> feature_logits;  // [T, H_f, W_f]
  Tensor<Scalar> pixel_logits;    // [T, H, W], bilinear upsampling of feature_logits
  Tensor<Scalar> probabilities;   // sigmoid(pixel_logits)
};

/// Unit grid for a clip [T, H, W, C], enforcing the configured size cap.
inline UnitGrid grid_for_clip(const Shape& clip_shape, const ModelConfig& cfg) {
  if (clip_shape.size() != 4 || clip_shape[3] != cfg.channels) {
    throw ShapeError("clip must be [T, H, W, " + std::to_string(cfg.channels) + "], got " + to_string(clip_shape));
  }
  if (clip_shape[1] > cfg.max_side || clip_shape[2] > cfg.max_side) {
    throw ShapeError("clip " + to_string(clip_shape) + " exceeds max side " + std::to_string(cfg.max_side));
  }
  return compute_unit_grid(clip_shape[1], clip_shape[2], cfg.unit_size, clip_shape[0]);
}

/// Standardized clip, (v - mean) / std; the model's first step.
template <typename Scalar>
Tensor<Scalar> normalize_input(const Tensor<Scalar>& clip, const ModelConfig& cfg) {
  std::vector<Scalar> values(clip.data().begin(), clip.data().end());
  for (auto& v : values) v = static_cast<Scalar>((v - cfg.input_mean) / cfg.input_std);
  const Scalar inv = static_cast<Scalar>(1.0 / cfg.input_std);
  return detail::make_result<Scalar>(clip.shape(), std::move(values), "normalize_input", {clip.node()},
                                     [inv](detail::Node<Scalar>& self) {
                                       auto g = self.inputs[0]->grad_buffer();
                                       for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * inv;
                                     });
}

namespace detail {

template <typename Scalar>
Prediction<Scalar> decode_sample(const RelayModel<Scalar>& model, const Tensor<Scalar>& patches, const UnitGrid& grid,
                                 bool one_shot) {
  const auto& cfg = model.config;
  const std::size_t nf = cfg.cells_per_side();
  const auto per_unit = reshape(final_norm(patches, model.backbone), Shape{grid.total_units(), nf, nf, cfg.dim});
  const auto features = reassemble_features(per_unit, grid, cfg.patch_side);
  Prediction<Scalar> out;
  out.grid = grid;
  out.feature_logits = decode_masks(features, model.decoder, cfg, one_shot);
  out.pixel_logits = upsample_bilinear(out.feature_logits, grid.frame_h, grid.frame_w);
  out.probabilities = sigmoid(out.pixel_logits);
  return out;
}

}  // namespace detail

/// Full forward pass on one clip [T, H, W, C] with pixel values in [0, 1].
template <typename Scalar>
Prediction<Scalar> forward(const RelayModel<Scalar>& model, const Tensor<Scalar>& clip, bool one_shot) {
  const auto& cfg = model.config;
  const UnitGrid grid = grid_for_clip(clip.shape(), cfg);
  const auto patches = patchify(partition_clip(normalize_input(clip, cfg), grid), cfg.patch_side);
  const auto rope = relay_rope_table(grid, cfg);
  const auto [x, relays] = backbone_forward(patches, 1, rope, model.backbone, cfg);
  return detail::decode_sample(model, x, grid, one_shot);
}

/// Forward pass over several clips. Clips with the same unit count run
/// through the backbone together (one batched pass per group); outputs are
/// returned in input order.
template <typename Scalar>
std::vector<Prediction<Scalar>> forward_grouped(const RelayModel<Scalar>& model, const std::vector<Tensor<Scalar>>& clips,
                                                bool one_shot) {
  const auto& cfg = model.config;
  std::vector<UnitGrid> grids;
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    grids.push_back(grid_for_clip(clips[i].shape(), cfg));
    groups[grids.back().total_units()].push_back(i);
  }
  std::vector<Prediction<Scalar>> out(clips.size());
  for (const auto& [units, members] : groups) {
    std::vector<Tensor<Scalar>> patch_sets;
    std::vector<RotaryTable> tables;
    bool shared_layout = true;
    for (const std::size_t i : members) {
      patch_sets.push_back(patchify(partition_clip(normalize_input(clips[i], cfg), grids[i]), cfg.patch_side));
      tables.push_back(relay_rope_table(grids[i], cfg));
      const auto& g0 = grids[members.front()];
      shared_layout = shared_layout && grids[i].rows == g0.rows && grids[i].cols == g0.cols &&
                      grids[i].clip_len == g0.clip_len;
    }
    const RotaryTable rope = shared_layout ? tables.front() : stack_tables(tables);
    const auto batch = patch_sets.size() == 1 ? patch_sets.front() : concat(patch_sets, 0);
    const auto [x, relays] = backbone_forward(batch, members.size(), rope, model.backbone, cfg);
    for (std::size_t k = 0; k < members.size(); ++k) {
      const auto mine = members.size() == 1 ? x : slice(x, 0, k * units, units);
      out[members[k]] = detail::decode_sample(model, mine, grids[members[k]], one_shot);
    }
  }
  return out;
}

}  // namespace relay
