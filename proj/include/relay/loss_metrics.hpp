#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "relay/ops.hpp"

namespace relay {

/// Row-major binary map, one byte per pixel (0 or 1).
struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w) : height(h), width(w), values(h * w, 0) {}

  std::uint8_t at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  std::uint8_t& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  std::size_t count() const;

  bool operator==(const BinaryMask&) const = default;
};

/// Square-element dilation of radius w; pixels outside the map are ignored.
BinaryMask dilate(const BinaryMask& m, std::size_t w);

/// Square-element erosion of radius w; pixels outside the map count as 0,
/// so foreground touching the border erodes there.
BinaryMask erode(const BinaryMask& m, std::size_t w);

/// Boundary band dilate(M, w) XOR erode(M, w).
BinaryMask edge_mask_from_gt(const BinaryMask& gt, std::size_t w);

/// Stacks frame masks into a [T, H, W] tensor of 0/1 values.
template <typename Scalar>
Tensor<Scalar> mask_tensor(const std::vector<BinaryMask>& frames) {
  if (frames.empty()) throw ShapeError("mask_tensor: no frames");
  const std::size_t h = frames[0].height, w = frames[0].width;
  std::vector<Scalar> values;
  values.reserve(frames.size() * h * w);
  for (const auto& f : frames) {
    if (f.height != h || f.width != w) throw ShapeError("mask_tensor: frame extents differ");
    for (const auto v : f.values) values.push_back(static_cast<Scalar>(v));
  }
  return Tensor<Scalar>(Shape{frames.size(), h, w}, std::move(values));
}

/// Mean BCE over all elements; probabilities clamped to [1e-7, 1 - 1e-7].
template <typename Scalar>
Tensor<Scalar> bce_loss(const Tensor<Scalar>& probs, const Tensor<Scalar>& target) {
  return binary_cross_entropy(probs, target);
}

/// BCE(P, M) + lambda * BCE(P * M_e, M * M_e), both means over the full map.
template <typename Scalar>
Tensor<Scalar> combined_loss(const Tensor<Scalar>& probs, const Tensor<Scalar>& target, const Tensor<Scalar>& edge,
                             double lambda) {
  if (probs.shape() != target.shape() || probs.shape() != edge.shape()) {
    throw ShapeError("combined_loss: shapes differ");
  }
  if (lambda < 0) throw ShapeError("combined_loss: lambda must be non-negative");
  const auto base = bce_loss(probs, target);
  if (lambda == 0) return base;
  const auto edge_term = bce_loss(mul(probs, edge), mul(target, edge));
  return add(base, scale(edge_term, static_cast<Scalar>(lambda)));
}

/// combined_loss(sigmoid(logits), target, edge, lambda) evaluated from the
/// logits. Outside the band the edge term is the constant -log(1 - 1e-7) per
/// pixel. Same value; gradients stay alive when the sigmoid saturates.
template <typename Scalar>
Tensor<Scalar> combined_loss_logits(const Tensor<Scalar>& logits, const Tensor<Scalar>& target,
                                    const Tensor<Scalar>& edge, double lambda) {
  if (logits.shape() != target.shape() || logits.shape() != edge.shape()) {
    throw ShapeError("combined_loss_logits: shapes differ");
  }
  if (lambda < 0) throw ShapeError("combined_loss_logits: lambda must be non-negative");
  const auto base = binary_cross_entropy_logits(logits, target);
  if (lambda == 0) return base;
  double outside = 0;
  for (const Scalar e : edge.data()) outside += e == Scalar(0) ? 1.0 : 0.0;
  const double floor = -std::log1p(-kProbabilityClamp) * outside / static_cast<double>(edge.size());
  const auto band = add_scalar(binary_cross_entropy_logits(logits, target, edge), static_cast<Scalar>(floor));
  return add(base, scale(band, static_cast<Scalar>(lambda)));
}

template <typename Scalar>
std::vector<std::uint8_t> binarize(std::span<const Scalar> probs, double threshold = 0.5) {
  std::vector<std::uint8_t> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) out[i] = probs[i] >= threshold ? 1 : 0;
  return out;
}

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

Confusion confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

/// 2TP / (2TP + FP + FN); 0 when the denominator is 0.
double f1_score(const Confusion& c);

/// |P and M| / |P or M|; `both_empty` when the union is empty.
double iou_score(const Confusion& c, double both_empty = 1.0);

template <typename Scalar>
double f1_at_threshold(std::span<const Scalar> probs, std::span<const std::uint8_t> gt, double threshold = 0.5) {
  const auto pred = binarize(probs, threshold);
  return f1_score(confusion(pred, gt));
}

double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, double both_empty = 1.0);

}  // namespace relay
