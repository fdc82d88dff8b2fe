#include "relay/loss_metrics.hpp"

#include <algorithm>

namespace relay {

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::uint8_t{1}));
}

namespace {

// Separable square-window reduction. `outside` is the value assumed beyond
// the border, or -1 to ignore out-of-range pixels.
BinaryMask window_reduce(const BinaryMask& m, std::size_t w, bool take_max, int outside) {
  const std::size_t h = m.height, wd = m.width;
  const auto pass = [&](const std::vector<std::uint8_t>& src, bool along_rows) {
    std::vector<std::uint8_t> dst(src.size());
    const std::size_t lines = along_rows ? h : wd;
    const std::size_t len = along_rows ? wd : h;
    for (std::size_t line = 0; line < lines; ++line) {
      for (std::size_t i = 0; i < len; ++i) {
        std::uint8_t acc = take_max ? 0 : 1;
        const std::ptrdiff_t lo = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(w);
        const std::ptrdiff_t hi = static_cast<std::ptrdiff_t>(i) + static_cast<std::ptrdiff_t>(w);
        for (std::ptrdiff_t j = lo; j <= hi; ++j) {
          std::uint8_t v;
          if (j < 0 || j >= static_cast<std::ptrdiff_t>(len)) {
            if (outside < 0) continue;
            v = static_cast<std::uint8_t>(outside);
          } else {
            const auto k = static_cast<std::size_t>(j);
            v = along_rows ? src[line * wd + k] : src[k * wd + line];
          }
          acc = take_max ? std::max(acc, v) : std::min(acc, v);
        }
        dst[along_rows ? line * wd + i : i * wd + line] = acc;
      }
    }
    return dst;
  };
  BinaryMask out(h, wd);
  out.values = pass(pass(m.values, true), false);
  return out;
}

}  // namespace

BinaryMask dilate(const BinaryMask& m, std::size_t w) { return window_reduce(m, w, true, -1); }

BinaryMask erode(const BinaryMask& m, std::size_t w) { return window_reduce(m, w, false, 0); }

BinaryMask edge_mask_from_gt(const BinaryMask& gt, std::size_t w) {
  if (w == 0) throw ShapeError("edge_mask_from_gt: band width must be >= 1");
  const auto grown = dilate(gt, w);
  const auto shrunk = erode(gt, w);
  BinaryMask out(gt.height, gt.width);
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = grown.values[i] ^ shrunk.values[i];
  return out;
}

Confusion confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) throw ShapeError("confusion: size mismatch");
  Confusion c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double f1_score(const Confusion& c) {
  const std::size_t denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

double iou_score(const Confusion& c, double both_empty) {
  const std::size_t uni = c.tp + c.fp + c.fn;
  return uni == 0 ? both_empty : static_cast<double>(c.tp) / static_cast<double>(uni);
}

double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, double both_empty) {
  return iou_score(confusion(pred, gt), both_empty);
}

}  // namespace relay
