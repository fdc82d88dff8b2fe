#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "relay/ops.hpp"

namespace relay {

/// Rotary embedding configuration. `axis_split` partitions the head dimension
/// into (token slot, unit column, unit row, frame) slices for the 4D variant.
struct RopeConfig {
  std::size_t head_dim = 0;
  double base_freq = 10000.0;
  std::array<std::size_t, 4> axis_split{};

  /// d/4 per axis rounded down to even, remainder to the token axis.
  static RopeConfig equal_split(std::size_t head_dim, double base_freq = 10000.0) {
    RopeConfig cfg;
    cfg.head_dim = head_dim;
    cfg.base_freq = base_freq;
    const std::size_t quarter = (head_dim / 4) & ~std::size_t{1};
    const std::size_t rest = head_dim >= 3 * quarter ? head_dim - 3 * quarter : 0;
    cfg.axis_split = {rest, quarter, quarter, quarter};
    return cfg;
  }

  void validate() const {
    std::size_t total = 0;
    for (const std::size_t d : axis_split) {
      if (d == 0 || d % 2 != 0) throw ShapeError("rope: every axis slice must be even and non-empty");
      total += d;
    }
    if (total != head_dim) throw ShapeError("rope: axis split does not sum to head_dim");
    if (!(base_freq > 1.0)) throw ShapeError("rope: base_freq must exceed 1");
  }
};

/// Coordinates of one relay token: slot within its unit, unit column, unit row, frame.
struct TokenPosition {
  std::size_t tok = 0;
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t t = 0;
};

/// theta_j = base^(-2j / sub_dim), j in [0, sub_dim/2).
inline std::vector<double> rope_frequencies(std::size_t sub_dim, double base_freq) {
  if (sub_dim == 0 || sub_dim % 2 != 0) throw ShapeError("rope: sub_dim must be even and positive");
  std::vector<double> theta(sub_dim / 2);
  for (std::size_t j = 0; j < theta.size(); ++j) {
    theta[j] = std::pow(base_freq, -2.0 * static_cast<double>(j) / static_cast<double>(sub_dim));
  }
  return theta;
}

/// Table rotating a length-`positions` sequence over a single `sub_dim` slice.
inline RotaryTable rope_table_1d(const std::vector<double>& positions, std::size_t sub_dim, double base_freq) {
  const auto theta = rope_frequencies(sub_dim, base_freq);
  RotaryTable table;
  table.seq = positions.size();
  table.half = sub_dim / 2;
  table.angle.resize(table.seq * table.half);
  for (std::size_t s = 0; s < table.seq; ++s) {
    for (std::size_t j = 0; j < table.half; ++j) table.angle[s * table.half + j] = positions[s] * theta[j];
  }
  return table;
}

/// Table for the 4D variant; each axis rotates its own contiguous slice.
inline RotaryTable rope_table_4d(const std::vector<TokenPosition>& positions, const RopeConfig& cfg) {
  cfg.validate();
  RotaryTable table;
  table.seq = positions.size();
  table.half = cfg.head_dim / 2;
  table.angle.assign(table.seq * table.half, 0.0);
  std::size_t offset = 0;
  for (std::size_t axis = 0; axis < 4; ++axis) {
    const auto theta = rope_frequencies(cfg.axis_split[axis], cfg.base_freq);
    for (std::size_t s = 0; s < table.seq; ++s) {
      const TokenPosition& p = positions[s];
      const std::size_t coord = axis == 0 ? p.tok : axis == 1 ? p.x : axis == 2 ? p.y : p.t;
      for (std::size_t j = 0; j < theta.size(); ++j) {
        table.angle[s * table.half + offset + j] = static_cast<double>(coord) * theta[j];
      }
    }
    offset += theta.size();
  }
  return table;
}

/// Stacks per-sample tables of equal sequence length into one batched table.
inline RotaryTable stack_tables(const std::vector<RotaryTable>& tables) {
  if (tables.empty()) throw ShapeError("stack_tables: empty");
  RotaryTable out;
  out.batch = tables.size();
  out.seq = tables[0].seq;
  out.half = tables[0].half;
  for (const auto& t : tables) {
    if (t.batch != 1 || t.seq != out.seq || t.half != out.half) throw ShapeError("stack_tables: table mismatch");
    out.angle.insert(out.angle.end(), t.angle.begin(), t.angle.end());
  }
  return out;
}

/// Rotates every `sub_dim` vector of `v` by position `pos`.
template <typename Scalar>
Tensor<Scalar> rope_rotate_1d(const Tensor<Scalar>& v, double pos, const RopeConfig& cfg) {
  const std::size_t sub_dim = v.dim(-1);
  if (sub_dim % 2 != 0) throw ShapeError("rope_rotate_1d: odd sub_dim");
  const auto table = rope_table_1d({pos}, sub_dim, cfg.base_freq);
  return reshape(rotary(reshape(v, Shape{v.size() / sub_dim, 1, sub_dim}), table), v.shape());
}

/// Applies the 4D rotary embedding to tokens[count, head_dim].
template <typename Scalar>
Tensor<Scalar> rope_4d_apply(const Tensor<Scalar>& tokens, const std::vector<TokenPosition>& positions,
                             const RopeConfig& cfg) {
  if (tokens.ndim() != 2 || tokens.dim(1) != cfg.head_dim) throw ShapeError("rope_4d_apply: token shape");
  if (tokens.dim(0) != positions.size()) throw ShapeError("rope_4d_apply: position/token count mismatch");
  return rotary(tokens, rope_table_4d(positions, cfg));
}

}  // namespace relay
