#include <cmath>
#include <numbers>

#include "doctest.h"
#include "oracles.hpp"
#include "relay/gradcheck.hpp"
#include "relay/loss_metrics.hpp"

using namespace relay;
using T = Tensor<double>;

namespace {

T random_probs(Shape shape, std::uint64_t seed) {
  CounterRng rng(seed);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(0.01, 0.99);
  return T(std::move(shape), std::move(v), true);
}

T random_binary(Shape shape, std::uint64_t seed, double p = 0.4) {
  CounterRng rng(seed);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform() < p ? 1.0 : 0.0;
  return T(std::move(shape), std::move(v));
}

double bce_sum_oracle(std::span<const double> p, std::span<const double> m, std::span<const double> e = {}) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double w = e.empty() ? 1.0 : e[i];
    s += oracle::bce(p[i] * w, m[i] * w);
  }
  return s / static_cast<double>(p.size());
}

BinaryMask square(std::size_t h, std::size_t w, std::size_t y0, std::size_t x0, std::size_t side) {
  BinaryMask m(h, w);
  for (std::size_t y = y0; y < y0 + side; ++y)
    for (std::size_t x = x0; x < x0 + side; ++x) m.at(y, x) = 1;
  return m;
}

BinaryMask band_oracle(const BinaryMask& m, long w) {
  const auto d = oracle::morph(m.values, m.height, m.width, w, true);
  const auto e = oracle::morph(m.values, m.height, m.width, w, false);
  BinaryMask out(m.height, m.width);
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = d[i] ^ e[i];
  return out;
}

}  // namespace

TEST_CASE("BCE values") {
  SUBCASE("exact prediction costs only the clamp") {
    const auto m = random_binary({4, 4}, 1);
    const double v = bce_loss(T(m.shape(), std::vector<double>(m.data().begin(), m.data().end())), m).item();
    CHECK(v == doctest::Approx(-std::log(1 - 1e-7)).epsilon(1e-9));
    CHECK(v < 1.1e-7);
  }
  SUBCASE("one half everywhere is ln 2") {
    CHECK(bce_loss(T::full({3, 5}, 0.5), random_binary({3, 5}, 2)).item() == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
  }
  SUBCASE("random maps match the elementwise sum") {
    const auto p = random_probs({4, 4}, 3);
    const auto m = random_binary({4, 4}, 4);
    CHECK(std::abs(bce_loss(p, m).item() - bce_sum_oracle(p.data(), m.data())) < 1e-12);
  }
  SUBCASE("saturated probabilities keep a corrective gradient") {
    T p(Shape{2}, std::vector<double>{0.0, 1.0}, true);
    bce_loss(p, T(Shape{2}, std::vector<double>{1.0, 0.0})).backward();
    CHECK(p.grad()[0] < -1e5);
    CHECK(p.grad()[1] > 1e5);
  }
}

TEST_CASE("edge band") {
  SUBCASE("empty mask gives an empty band") {
    CHECK(edge_mask_from_gt(BinaryMask(9, 11), 2).count() == 0);
  }
  SUBCASE("zero width is rejected") {
    CHECK_THROWS_AS(edge_mask_from_gt(square(6, 6, 1, 1, 2), 0), ShapeError);
  }
  SUBCASE("centred square, w=1: a two-pixel ring on the border") {
    const auto m = square(12, 12, 4, 4, 4);
    const auto band = edge_mask_from_gt(m, 1);
    CHECK(band == band_oracle(m, 1));
    // dilated square 6x6 minus eroded 2x2
    CHECK(band.count() == 36 - 4);
    CHECK(band.at(3, 3) == 1);
    CHECK(band.at(4, 4) == 1);
    CHECK(band.at(5, 5) == 0);
    CHECK(band.at(2, 2) == 0);
  }
  SUBCASE("full frame: band only along the border") {
    BinaryMask m(7, 9);
    m.values.assign(63, 1);
    const auto band = edge_mask_from_gt(m, 1);
    CHECK(band == band_oracle(m, 1));
    CHECK(band.count() == 63 - 5 * 7);
  }
  SUBCASE("random masks against brute force") {
    CounterRng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
      BinaryMask m(13, 17);
      for (auto& v : m.values) v = rng.uniform() < 0.3;
      const std::size_t w = 1 + trial % 4;
      CHECK(dilate(m, w).values == oracle::morph(m.values, 13, 17, static_cast<long>(w), true));
      CHECK(erode(m, w).values == oracle::morph(m.values, 13, 17, static_cast<long>(w), false));
      CHECK(edge_mask_from_gt(m, w) == band_oracle(m, static_cast<long>(w)));
    }
  }
}

TEST_CASE("combined loss") {
  const auto p = random_probs({2, 4, 4}, 6);
  const auto m = random_binary({2, 4, 4}, 7);
  const auto e = random_binary({2, 4, 4}, 8, 0.5);

  SUBCASE("lambda zero is plain BCE") {
    CHECK(combined_loss(p, m, e, 0.0).item() == bce_loss(p, m).item());
  }
  SUBCASE("an all-ones band multiplies BCE by 1 + lambda") {
    const double b = bce_loss(p, m).item();
    CHECK(combined_loss(p, m, T::full({2, 4, 4}, 1.0), 20.0).item() == doctest::Approx(21 * b).epsilon(1e-14));
  }
  SUBCASE("lambda 20 matches the two-term oracle") {
    const double want = bce_sum_oracle(p.data(), m.data()) + 20.0 * bce_sum_oracle(p.data(), m.data(), e.data());
    CHECK(std::abs(combined_loss(p, m, e, 20.0).item() - want) < 1e-12);
  }
  SUBCASE("the logit form has the same value") {
    T logits(p.shape());
    for (std::size_t i = 0; i < p.size(); ++i) logits.mutable_data()[i] = std::log(p[i] / (1 - p[i]));
    const auto probs = sigmoid(logits);
    CHECK(combined_loss_logits(logits, m, e, 20.0).item() ==
          doctest::Approx(combined_loss(probs, m, e, 20.0).item()).epsilon(1e-12));
    CHECK(combined_loss_logits(logits, m, e, 0.0).item() ==
          doctest::Approx(combined_loss(probs, m, e, 0.0).item()).epsilon(1e-12));
  }
  SUBCASE("both forms have correct gradients") {
    const auto r1 = gradcheck([&] { return combined_loss(p, m, e, 20.0); }, {p});
    CHECK(r1.max_rel_error < 1e-5);
    T x = oracle::random({2, 4, 4}, 9, 2.0, true);
    const auto r2 = gradcheck([&] { return combined_loss_logits(x, m, e, 20.0); }, {x});
    CHECK(r2.max_rel_error < 1e-5);
  }
  SUBCASE("bad arguments throw") {
    CHECK_THROWS_AS(combined_loss(p, m, e, -1.0), ShapeError);
    CHECK_THROWS_AS(combined_loss(p, random_binary({2, 4, 5}, 10), e, 1.0), ShapeError);
  }
}

TEST_CASE("F1") {
  const std::vector<std::uint8_t> gt{1, 1, 0, 0, 1, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0};
  CHECK(f1_score(confusion(gt, gt)) == 1.0);
  CHECK(f1_score(confusion(std::vector<std::uint8_t>(16, 0), gt)) == 0.0);
  // TP = 2, FP = 1, FN = 1
  std::vector<std::uint8_t> gt2(16, 0), pred(16, 0);
  gt2[0] = gt2[1] = gt2[2] = 1;
  pred[0] = pred[1] = pred[5] = 1;
  const auto c = confusion(pred, gt2);
  CHECK(c.tp == 2);
  CHECK(c.fp == 1);
  CHECK(c.fn == 1);
  CHECK(c.tn == 12);
  CHECK(f1_score(c) == doctest::Approx(2.0 / 3).epsilon(1e-15));

  const std::vector<double> probs{0.9, 0.5, 0.49, 0.0};
  const std::vector<std::uint8_t> g{1, 1, 1, 0};
  CHECK(f1_at_threshold<double>(probs, g) == doctest::Approx(0.8));
  CHECK(binarize<double>(probs) == std::vector<std::uint8_t>{1, 1, 0, 0});
}

TEST_CASE("IoU") {
  const auto a = square(8, 8, 0, 0, 4);
  CHECK(iou(a.values, a.values) == 1.0);
  CHECK(iou(a.values, square(8, 8, 4, 4, 4).values) == 0.0);
  // equal squares overlapping by half: 8 / (16 + 16 - 8)
  CHECK(iou(a.values, square(8, 8, 0, 2, 4).values) == doctest::Approx(1.0 / 3).epsilon(1e-15));
  const BinaryMask empty(8, 8);
  CHECK(iou(empty.values, empty.values) == 1.0);
  CHECK(iou(empty.values, empty.values, 0.0) == 0.0);
  CHECK_THROWS(iou(a.values, std::vector<std::uint8_t>(3, 0)));
}

TEST_CASE("mask tensors stack frames") {
  std::vector<BinaryMask> frames{square(3, 4, 0, 0, 2), square(3, 4, 1, 1, 2)};
  const auto t = mask_tensor<double>(frames);
  REQUIRE(t.shape() == Shape{2, 3, 4});
  CHECK(t[0] == 1.0);
  CHECK(t[12 + 5] == 1.0);
  CHECK(t[12] == 0.0);
  frames.push_back(BinaryMask(2, 4));
  CHECK_THROWS_AS(mask_tensor<double>(frames), ShapeError);
}
