#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "relay/decoder.hpp"
#include "relay/gradcheck.hpp"

using namespace relay;
using oracle::Rows;
using T = Tensor<double>;

namespace {

ModelConfig decoder_config(std::size_t queries, std::size_t heads = 1) {
  ModelConfig c = gradcheck_model_config();
  c.queries = queries;
  c.heads = heads;
  c.dim = 8 * heads;
  c.low_dim = 4;
  c.decoder_layers = 2;
  return c;
}

/// Decoder with every tensor randomized so biases and norms are exercised.
DecoderParams<double> random_decoder(const ModelConfig& cfg, std::uint64_t seed) {
  CounterRng rng(seed);
  auto dec = init_decoder<double>(cfg, rng);
  visit_parameters(dec, [&](const std::string& name, const T& t, ParamGroup) {
    const bool gamma = name.ends_with("gamma");
    for (auto& v : T(t).mutable_data()) v += (gamma ? 0.2 : 0.1) * rng.normal();
  });
  return dec;
}

Rows weight_rows(const T& w) { return oracle::to_rows(w.data(), w.dim(1)); }

/// Unfused pre-norm attention residual; kv rows are used raw when given.
Rows attention_oracle(const Rows& q_in, const Rows* kv_in, const AttentionWeights<double>& w, std::size_t heads,
                      const Rows* angles) {
  const auto h = oracle::norm_rows(q_in, w.norm_gamma.data(), w.norm_beta.data());
  const Rows& kv = kv_in ? *kv_in : h;
  auto q = oracle::affine(h, weight_rows(w.q_weight), w.q_bias.data());
  auto k = oracle::affine(kv, weight_rows(w.k_weight), w.k_bias.data());
  const auto v = oracle::affine(kv, weight_rows(w.v_weight), w.v_bias.data());
  if (angles) {
    oracle::rotate_rows(q, *angles, heads);
    oracle::rotate_rows(k, *angles, heads);
  }
  return oracle::add_rows(oracle::affine(oracle::multi_head(q, k, v, heads), weight_rows(w.o_weight), w.o_bias.data()),
                          q_in);
}

Rows query_angles(const ModelConfig& cfg) {
  const std::size_t dh = cfg.head_dim();
  Rows a(cfg.queries, std::vector<double>(dh / 2));
  for (std::size_t j = 0; j < cfg.queries; ++j)
    for (std::size_t i = 0; i < dh / 2; ++i)
      a[j][i] = static_cast<double>(j) * std::pow(cfg.rope_base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
  return a;
}

Rows layer_oracle(const Rows& queries, const Rows& cells, const DecoderLayerParams<double>& layer,
                  const ModelConfig& cfg) {
  const auto crossed = attention_oracle(queries, &cells, layer.cross, cfg.heads, nullptr);
  const auto angles = query_angles(cfg);
  return attention_oracle(crossed, nullptr, layer.self, cfg.heads, &angles);
}

/// Oracle logits for one frame's cells given final (normed) queries.
std::vector<double> logits_oracle(const Rows& cells, const Rows& q, const DecoderParams<double>& dec) {
  auto gelu_rows = [](Rows r) {
    for (auto& row : r)
      for (auto& v : row) v = oracle::gelu(v);
    return r;
  };
  const auto embed = oracle::affine(
      gelu_rows(oracle::affine(q, weight_rows(dec.mask_fc1_weight), dec.mask_fc1_bias.data())),
      weight_rows(dec.mask_fc2_weight), dec.mask_fc2_bias.data());
  const auto gate = oracle::affine(
      gelu_rows(oracle::affine(q, weight_rows(dec.gate_fc1_weight), dec.gate_fc1_bias.data())),
      weight_rows(dec.gate_fc2_weight), dec.gate_fc2_bias.data());
  std::vector<double> out(cells.size(), 0.0);
  for (std::size_t s = 0; s < cells.size(); ++s)
    for (std::size_t j = 0; j < q.size(); ++j) {
      double dot = 0;
      for (std::size_t c = 0; c < cells[s].size(); ++c) dot += embed[j][c] * cells[s][c];
      out[s] += oracle::sigmoid(gate[j][0]) * dot;
    }
  return out;
}

}  // namespace

TEST_CASE("feature projection") {
  const auto cfg = decoder_config(2);
  auto dec = random_decoder(cfg, 1);
  const auto f = oracle::random({2, 3, 5, cfg.dim}, 2);

  SUBCASE("truncated identity keeps the first channels") {
    for (std::size_t i = 0; i < dec.proj_weight.size(); ++i)
      dec.proj_weight.mutable_data()[i] = (i / cfg.dim == i % cfg.dim) ? 1.0 : 0.0;
    for (auto& v : dec.proj_bias.mutable_data()) v = 0;
    const auto p = project_features(f, dec);
    REQUIRE(p.shape() == Shape{2, 3, 5, cfg.low_dim});
    for (std::size_t cell = 0; cell < 30; ++cell)
      for (std::size_t c = 0; c < cfg.low_dim; ++c) CHECK(p[cell * cfg.low_dim + c] == f[cell * cfg.dim + c]);
  }
  SUBCASE("zero features give the bias row") {
    const auto p = project_features(T::zeros({1, 2, 2, cfg.dim}), dec);
    for (std::size_t cell = 0; cell < 4; ++cell)
      for (std::size_t c = 0; c < cfg.low_dim; ++c) CHECK(p[cell * cfg.low_dim + c] == dec.proj_bias[c]);
    for (auto& v : dec.proj_bias.mutable_data()) v = 0;
    const auto z = project_features(T::zeros({1, 2, 2, cfg.dim}), dec);
    for (double v : z.data()) CHECK(v == 0.0);
  }
  SUBCASE("random input matches the per-cell product") {
    const auto want = oracle::affine(oracle::to_rows(f.data(), cfg.dim), weight_rows(dec.proj_weight), dec.proj_bias.data());
    CHECK(oracle::max_abs_diff(project_features(f, dec).data(), oracle::flatten(want)) < 1e-10);
  }
}

TEST_CASE("uniform cross-attention logits average the value vectors") {
  const auto cfg = decoder_config(3);
  auto dec = random_decoder(cfg, 3);
  auto& cross = dec.layers[0].cross;
  for (auto& v : cross.q_weight.mutable_data()) v = 0;
  for (auto& v : cross.q_bias.mutable_data()) v = 0;
  const auto q = oracle::random({1, 3, cfg.dim}, 4), cells = oracle::random({1, 6, cfg.low_dim}, 5);
  const auto out = attention_residual(q, cells, cross, cfg.heads, nullptr);
  const auto v = oracle::affine(oracle::to_rows(cells.data(), cfg.low_dim), weight_rows(cross.v_weight), cross.v_bias.data());
  Rows mean(1, std::vector<double>(cfg.dim, 0.0));
  for (const auto& row : v)
    for (std::size_t c = 0; c < cfg.dim; ++c) mean[0][c] += row[c] / 6;
  const auto mixed = oracle::affine(mean, weight_rows(cross.o_weight), cross.o_bias.data());
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t c = 0; c < cfg.dim; ++c) CHECK(std::abs(out[j * cfg.dim + c] - q[j * cfg.dim + c] - mixed[0][c]) < 1e-12);
}

TEST_CASE("a single query attends only to itself") {
  const auto cfg = decoder_config(1);
  const auto dec = random_decoder(cfg, 6);
  const auto& w = dec.layers[0].self;
  const auto q = oracle::random({1, 1, cfg.dim}, 7);
  const auto rope = query_rope_table(cfg);
  const auto out = attention_residual(q, T{}, w, cfg.heads, &rope);
  const auto h = oracle::norm_rows(oracle::to_rows(q.data(), cfg.dim), w.norm_gamma.data(), w.norm_beta.data());
  const auto v = oracle::affine(h, weight_rows(w.v_weight), w.v_bias.data());
  const auto want = oracle::add_rows(oracle::affine(v, weight_rows(w.o_weight), w.o_bias.data()), oracle::to_rows(q.data(), cfg.dim));
  CHECK(oracle::max_abs_diff(out.data(), oracle::flatten(want)) < 1e-12);
}

TEST_CASE("decoder layer matches the unfused cross then self oracle") {
  for (const std::size_t heads : {1, 2}) {
    const auto cfg = decoder_config(2, heads);
    const auto dec = random_decoder(cfg, 8 + heads);
    const auto q = oracle::random({1, 2, cfg.dim}, 10), cells = oracle::random({1, 3, cfg.low_dim}, 11);
    const auto got = decoder_layer(q, cells, dec.layers[0], cfg);
    const auto want = layer_oracle(oracle::to_rows(q.data(), cfg.dim), oracle::to_rows(cells.data(), cfg.low_dim),
                                   dec.layers[0], cfg);
    CHECK(oracle::max_abs_diff(got.data(), oracle::flatten(want)) < 1e-10);
  }
}

TEST_CASE("mask logits are gated sums of embedding dot products") {
  const auto cfg = decoder_config(3);
  const auto dec = random_decoder(cfg, 12);
  const auto cells = oracle::random({2, 5, cfg.low_dim}, 13), q = oracle::random({2, 3, cfg.dim}, 14);
  const auto got = mask_logits(cells, q, dec);
  REQUIRE(got.shape() == Shape{2, 5});
  for (std::size_t t = 0; t < 2; ++t) {
    const auto want = logits_oracle(oracle::to_rows(cells.data().subspan(t * 5 * cfg.low_dim, 5 * cfg.low_dim), cfg.low_dim),
                                    oracle::to_rows(q.data().subspan(t * 3 * cfg.dim, 3 * cfg.dim), cfg.dim), dec);
    CHECK(oracle::max_abs_diff(got.data().subspan(t * 5, 5), want) < 1e-10);
  }
}

TEST_CASE("full decode matches the composed oracle") {
  const auto cfg = decoder_config(2);
  const auto dec = random_decoder(cfg, 15);
  const auto f = oracle::random({1, 2, 3, cfg.dim}, 16);
  const auto got = decode_masks(f, dec, cfg, false);
  const auto cells = oracle::affine(oracle::to_rows(f.data(), cfg.dim), weight_rows(dec.proj_weight), dec.proj_bias.data());
  Rows q = oracle::to_rows(dec.queries.data(), cfg.dim);
  for (const auto& layer : dec.layers) q = layer_oracle(q, cells, layer, cfg);
  q = oracle::norm_rows(q, dec.out_gamma.data(), dec.out_beta.data());
  CHECK(oracle::max_abs_diff(got.data(), logits_oracle(cells, q, dec)) < 1e-10);
}

TEST_CASE("one-shot decoding") {
  const auto cfg = decoder_config(2);
  const auto dec = random_decoder(cfg, 17);
  SUBCASE("a single frame gives bitwise identical logits") {
    const auto f = oracle::random({1, 4, 4, cfg.dim}, 18);
    const auto a = decode_masks(f, dec, cfg, true), b = decode_masks(f, dec, cfg, false);
    CHECK(oracle::max_abs_diff(a.data(), b.data()) == 0.0);
  }
  SUBCASE("identical frames agree") {
    const auto one = oracle::random({1, 4, 4, cfg.dim}, 19);
    const auto f = concat<double>({one, one, one, one}, 0);
    const auto a = decode_masks(f, dec, cfg, true), b = decode_masks(f, dec, cfg, false);
    CHECK(oracle::max_abs_diff(a.data(), b.data()) < 1e-6);
  }
  SUBCASE("differing frames reuse the first frame's queries") {
    const auto f = oracle::random({3, 2, 2, cfg.dim}, 20);
    const auto a = decode_masks(f, dec, cfg, true);
    const auto first = decode_queries(reshape(slice(project_features(f, dec), 0, 0, 1), {1, 4, cfg.low_dim}), dec, cfg);
    const auto want = mask_logits(reshape(project_features(f, dec), {3, 4, cfg.low_dim}), first, dec);
    CHECK(oracle::max_abs_diff(a.data(), want.data()) < 1e-14);
    CHECK(oracle::max_abs_diff(a.data(), decode_masks(f, dec, cfg, false).data()) > 1e-6);
  }
}

TEST_CASE("closed gates silence every query") {
  const auto cfg = decoder_config(2);
  auto dec = random_decoder(cfg, 21);
  for (auto& v : dec.gate_fc2_weight.mutable_data()) v = 0;
  dec.gate_fc2_bias.mutable_data()[0] = -200.0;
  const auto out = decode_masks(oracle::random({2, 3, 3, cfg.dim}, 22), dec, cfg, false);
  for (double v : out.data()) CHECK(std::abs(v) < 1e-60);
}

TEST_CASE("bad shapes throw") {
  const auto cfg = decoder_config(2);
  const auto dec = random_decoder(cfg, 23);
  CHECK_THROWS_AS(decode_masks(oracle::random({2, 3, cfg.dim}, 24), dec, cfg, false), ShapeError);
  CHECK_THROWS_AS(decoder_layer(oracle::random({1, 3, cfg.dim}, 25), oracle::random({1, 4, cfg.low_dim}, 26),
                                dec.layers[0], cfg),
                  ShapeError);
}

TEST_CASE("decoder gradients match central differences") {
  const auto cfg = decoder_config(2);
  const auto dec = random_decoder(cfg, 27);
  std::vector<T> inputs;
  std::vector<std::string> names;
  visit_parameters(dec, [&](const std::string& n, const T& t, ParamGroup) {
    inputs.push_back(t);
    names.push_back(n);
  });
  T features = oracle::random({2, 2, 3, cfg.dim}, 28, 1.0, true);
  inputs.push_back(features);
  names.push_back("features");
  const auto w = oracle::random({2, 2, 3}, 29);
  for (const bool one_shot : {false, true}) {
    const auto r = gradcheck([&] { return sum(mul(decode_masks(features, dec, cfg, one_shot), w)); }, inputs, names);
    INFO(r.worst);
    CHECK(r.max_rel_error < 1e-4);
  }
}
