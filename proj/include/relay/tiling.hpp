#pragma once

#include <memory>
#include <vector>

#include "relay/ops.hpp"

namespace relay {

/// Geometry of a frame or clip cut into non-overlapping P x P units.
/// Units are indexed frame-major, then row-major within a frame.
struct UnitGrid {
  std::size_t frame_h = 0;
  std::size_t frame_w = 0;
  std::size_t unit_size = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t pad_bottom = 0;
  std::size_t pad_right = 0;
  std::size_t clip_len = 1;

  struct Coord {
    std::size_t t = 0;
    std::size_t row = 0;
    std::size_t col = 0;
  };

  std::size_t units_per_frame() const { return rows * cols; }
  std::size_t total_units() const { return rows * cols * clip_len; }

  Coord coord(std::size_t unit) const {
    return {unit / (rows * cols), (unit / cols) % rows, unit % cols};
  }
  std::size_t index(std::size_t t, std::size_t row, std::size_t col) const {
    return (t * rows + row) * cols + col;
  }

  bool operator==(const UnitGrid&) const = default;
};

inline UnitGrid compute_unit_grid(std::size_t h, std::size_t w, std::size_t p, std::size_t t) {
  if (h == 0 || w == 0 || p == 0 || t == 0) throw ShapeError("compute_unit_grid: extents must be positive");
  UnitGrid g;
  g.frame_h = h;
  g.frame_w = w;
  g.unit_size = p;
  g.clip_len = t;
  g.rows = (h + p - 1) / p;
  g.cols = (w + p - 1) / p;
  g.pad_bottom = g.rows * p - h;
  g.pad_right = g.cols * p - w;
  return g;
}

/// Cuts frames[T, H, W, C] into units[M, P, P, C], filling the padded margin
/// with `pad_value`. Gradients flow back to the frame pixels; the padding
/// gets none.
template <typename Scalar>
Tensor<Scalar> partition_clip(const Tensor<Scalar>& frames, const UnitGrid& grid, Scalar pad_value = Scalar(0)) {
  if (frames.ndim() != 4 || frames.dim(0) != grid.clip_len || frames.dim(1) != grid.frame_h ||
      frames.dim(2) != grid.frame_w) {
    throw ShapeError("partition_clip: frames " + to_string(frames.shape()) + " do not match grid");
  }
  const std::size_t p = grid.unit_size, c = frames.dim(3);
  const std::size_t h = grid.frame_h, w = grid.frame_w;
  // calls f(unit offset, frame offset, count) once per copied row segment
  const auto rows = [grid, p, c, h, w](auto&& f) {
    for (std::size_t u = 0; u < grid.total_units(); ++u) {
      const auto at = grid.coord(u);
      const std::size_t x_end = std::min(p, w - at.col * p);
      for (std::size_t y = 0; y < p; ++y) {
        const std::size_t fy = at.row * p + y;
        if (fy >= h) break;
        f(((u * p + y) * p) * c, ((at.t * h + fy) * w + at.col * p) * c, x_end * c);
      }
    }
  };
  std::vector<Scalar> out(grid.total_units() * p * p * c, pad_value);
  const auto src = frames.data();
  rows([&](std::size_t to, std::size_t from, std::size_t n) { std::copy_n(src.data() + from, n, out.begin() + to); });
  return detail::make_result<Scalar>(Shape{grid.total_units(), p, p, c}, std::move(out), "partition_clip",
                                     {frames.node()}, [rows](detail::Node<Scalar>& self) {
                                       auto g = self.inputs[0]->grad_buffer();
                                       rows([&](std::size_t to, std::size_t from, std::size_t n) {
                                         for (std::size_t i = 0; i < n; ++i) g[from + i] += self.grad[to + i];
                                       });
                                     });
}

/// Frame-space feature extents when each unit carries (P/stride)^2 cells.
inline std::pair<std::size_t, std::size_t> feature_extent(const UnitGrid& grid, std::size_t stride) {
  return {(grid.frame_h + stride - 1) / stride, (grid.frame_w + stride - 1) / stride};
}

/// Places per_unit[M, n_f, n_f, d] at each unit's offset and crops the padded
/// cells, giving [T, ceil(H/stride), ceil(W/stride), d]. Differentiable.
template <typename Scalar>
Tensor<Scalar> reassemble_features(const Tensor<Scalar>& per_unit, const UnitGrid& grid, std::size_t stride) {
  if (stride == 0 || grid.unit_size % stride != 0) throw ShapeError("reassemble_features: stride must divide unit size");
  const std::size_t nf = grid.unit_size / stride;
  if (per_unit.ndim() != 4 || per_unit.dim(0) != grid.total_units() || per_unit.dim(1) != nf ||
      per_unit.dim(2) != nf) {
    throw ShapeError("reassemble_features: tensor " + to_string(per_unit.shape()) + " inconsistent with grid");
  }
  const auto [hf, wf] = feature_extent(grid, stride);
  std::vector<std::size_t> rows;
  rows.reserve(grid.clip_len * hf * wf);
  for (std::size_t t = 0; t < grid.clip_len; ++t) {
    for (std::size_t y = 0; y < hf; ++y) {
      for (std::size_t x = 0; x < wf; ++x) {
        const std::size_t unit = grid.index(t, y / nf, x / nf);
        rows.push_back((unit * nf + y % nf) * nf + x % nf);
      }
    }
  }
  return gather_rows(per_unit, rows, Shape{grid.clip_len, hf, wf, per_unit.dim(3)});
}

/// Splits units[M, P, P, C] into patch vectors [M, (P/s)^2, s*s*C], patches
/// row-major and each vector ordered (py, px, c).
template <typename Scalar>
Tensor<Scalar> patchify(const Tensor<Scalar>& units, std::size_t side) {
  if (units.ndim() != 4 || units.dim(1) != units.dim(2) || side == 0 || units.dim(1) % side != 0) {
    throw ShapeError("patchify: units " + to_string(units.shape()) + " not divisible by patch side");
  }
  const std::size_t m = units.dim(0), p = units.dim(1), c = units.dim(3);
  const std::size_t per = p / side;
  const std::size_t pd = side * side * c;
  auto source = std::make_shared<std::vector<std::size_t>>();
  source->reserve(units.size());
  for (std::size_t u = 0; u < m; ++u) {
    for (std::size_t py = 0; py < per; ++py) {
      for (std::size_t px = 0; px < per; ++px) {
        for (std::size_t y = 0; y < side; ++y) {
          const std::size_t row = ((u * p + py * side + y) * p + px * side) * c;
          for (std::size_t i = 0; i < side * c; ++i) source->push_back(row + i);
        }
      }
    }
  }
  return detail::gather_flat(units, std::move(source), Shape{m, per * per, pd}, "patchify");
}

}  // namespace relay
