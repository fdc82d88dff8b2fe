#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "relay/config.hpp"
#include "relay/io.hpp"
#include "relay/loss_metrics.hpp"
#include "relay/rng.hpp"

namespace relay {

enum class ManipulationKind { copy_move, inpaint };

std::string to_string(ManipulationKind kind);

struct Rect {
  std::size_t y = 0, x = 0, h = 0, w = 0;

  std::size_t area() const { return h * w; }
  bool contains(std::size_t py, std::size_t px) const { return py >= y && py < y + h && px >= x && px < x + w; }
  bool overlaps(const Rect& o) const { return y < o.y + o.h && o.y < y + h && x < o.x + o.w && o.x < x + w; }
  bool operator==(const Rect&) const = default;
};

/// What to manipulate. `source` is only read for copy-move and must have the
/// target's extents. Frames in [frame_begin, frame_end) are manipulated.
struct ManipulationSpec {
  std::size_t height = 128, width = 128, channels = 3, frames = 1;
  ManipulationKind kind = ManipulationKind::copy_move;
  Rect source;
  Rect target;
  std::size_t frame_begin = 0;
  std::size_t frame_end = 1;
};

struct SyntheticSample {
  std::vector<Image> frames;
  std::vector<BinaryMask> masks;
  ManipulationSpec spec;

  template <typename Scalar>
  Tensor<Scalar> clip() const {
    std::vector<Scalar> values;
    for (const auto& f : frames) {
      const auto t = image_to_tensor<Scalar>(f, spec.channels);
      values.insert(values.end(), t.data().begin(), t.data().end());
    }
    return Tensor<Scalar>(Shape{frames.size(), spec.height, spec.width, spec.channels}, std::move(values));
  }

  template <typename Scalar>
  Tensor<Scalar> mask() const {
    return mask_tensor<Scalar>(masks);
  }
};

/// Throws ShapeError when a rectangle leaves the frame, copy-move rectangles
/// differ in size, or the frame range is invalid.
void validate(const ManipulationSpec& spec);

/// Textured, noisy base clip (static scene plus per-frame noise) generated
/// from `seed`, with the manipulation applied. A zero-area target leaves the
/// clip untouched and the mask empty. Copy-move with source == target leaves
/// the pixels unchanged but still marks the rectangle.
SyntheticSample gen_synthetic(std::uint64_t seed, const ManipulationSpec& spec);

/// Random manipulation for a frame of the configured size, drawn from `rng`.
/// Rectangle corners and sides are multiples of `data.align`.
ManipulationSpec random_spec(const DataConfig& data, std::size_t channels, CounterRng& rng);

/// Mirror every frame and mask left to right.
SyntheticSample flip_horizontal(const SyntheticSample& s);

/// `data.samples` samples; sample i uses seed CounterRng(data.seed, i).next_u64().
std::vector<SyntheticSample> generate_dataset(const DataConfig& data, std::size_t channels);

void to_json(nlohmann::json& j, const ManipulationSpec& s);
void from_json(const nlohmann::json& j, ManipulationSpec& s);

/// One directory per sample: sample_NNNN/frame_TTTT.{pgm,ppm},
/// sample_NNNN/masks/mask_TTTT.pgm (255 = manipulated) and spec.json.
void save_dataset(const std::filesystem::path& dir, const std::vector<SyntheticSample>& samples);
std::vector<SyntheticSample> load_dataset(const std::filesystem::path& dir);

}  // namespace relay
