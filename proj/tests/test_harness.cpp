#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "relay/checkpoint.hpp"
#include "relay/gradcheck.hpp"
#include "relay/train.hpp"

using namespace relay;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("relay_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

ManipulationSpec small_spec(ManipulationKind kind) {
  ManipulationSpec s;
  s.height = 24;
  s.width = 32;
  s.channels = 3;
  s.frames = 3;
  s.kind = kind;
  s.source = {2, 3, 6, 8};
  s.target = {12, 18, 6, 8};
  s.frame_begin = 1;
  s.frame_end = 3;
  return s;
}

ManipulationSpec empty_target(ManipulationSpec s) {
  s.target = {0, 0, 0, 0};
  s.source = {0, 0, 0, 0};
  return s;
}

// Tiny run: one 16x16 frame, two units of 8, d=8.
RunConfig toy_run(std::uint64_t seed) {
  RunConfig r;
  r.model = gradcheck_model_config();
  r.optim.lr = 3e-4;
  r.optim.min_lr = 3e-4;
  r.optim.warmup_steps = 0;
  r.optim.accumulation_steps = 1;
  r.optim.weight_decay = 0.0;
  r.edge_width = 1;
  r.edge_lambda = 1.0;
  r.steps = 20;
  r.seed = seed;
  return r;
}

SyntheticSample toy_sample(std::uint64_t seed) {
  ManipulationSpec s;
  s.height = 8;
  s.width = 16;
  s.frames = 1;
  s.frame_end = 1;
  s.kind = ManipulationKind::inpaint;
  s.target = {2, 9, 4, 5};
  return gen_synthetic(seed, s);
}

}  // namespace

TEST_CASE("RTNS round trip and byte layout") {
  const Shape shape{2, 3};
  const std::vector<double> d{1.5, -2.25, 0.0, 1e-300, 3.0, -0.0};
  std::stringstream buf;
  write_rtns(buf, shape, std::span<const double>(d));
  const std::string bytes = buf.str();
  REQUIRE(bytes.size() == 4 + 4 + 1 + 1 + 2 * 8 + 6 * 8);
  CHECK(bytes.substr(0, 4) == "RTNS");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  CHECK(bytes[8] == 1);  // f64
  CHECK(bytes[9] == 2);
  CHECK(bytes[10] == 2);  // first extent, little-endian
  CHECK(bytes[18] == 3);
  const auto raw = read_rtns(buf);
  CHECK(raw.dtype == DType::f64);
  CHECK(raw.shape == shape);
  CHECK(raw.values == d);

  const std::vector<float> f{0.1f, 2.0f, -3.5f};
  std::stringstream fbuf;
  write_rtns(fbuf, Shape{3}, std::span<const float>(f));
  CHECK(fbuf.str().size() == 10 + 8 + 12);
  const auto rf = read_rtns(fbuf);
  CHECK(rf.dtype == DType::f32);
  for (std::size_t i = 0; i < 3; ++i) CHECK(rf.values[i] == static_cast<double>(f[i]));

  SUBCASE("bad magic") {
    std::stringstream bad("RTNX" + bytes.substr(4));
    CHECK_THROWS_AS(read_rtns(bad), FormatError);
  }
  SUBCASE("truncated payload") {
    std::stringstream cut(bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(read_rtns(cut), FormatError);
  }
  SUBCASE("file helpers and tensor conversion") {
    const auto dir = scratch("rtns");
    const auto t = oracle::random({2, 2, 3}, 1);
    save_tensor(dir / "t.rtns", t);
    const auto back = load_tensor<double>(dir / "t.rtns");
    CHECK(back.shape() == t.shape());
    CHECK(oracle::max_abs_diff(back.data(), t.data()) == 0.0);
    CHECK_THROWS_AS(load_rtns_file(dir / "missing.rtns"), FormatError);
  }
}

TEST_CASE("PNM images") {
  const auto dir = scratch("pnm");
  Image gray{5, 3, 1, {}};
  for (std::size_t i = 0; i < 15; ++i) gray.pixels.push_back(static_cast<std::uint8_t>(i * 17));
  write_pnm(dir / "g.pgm", gray);
  CHECK(read_pnm(dir / "g.pgm") == gray);

  Image color{2, 2, 3, {255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30}};
  write_pnm(dir / "c.ppm", color);
  CHECK(read_pnm(dir / "c.ppm") == color);

  std::ofstream(dir / "a.pgm") << "P2\n# comment\n2 2\n15\n0 15\n5 10\n";
  const auto ascii = read_pnm(dir / "a.pgm");
  CHECK(ascii.width == 2);
  CHECK(ascii.pixels == std::vector<std::uint8_t>{0, 255, 85, 170});

  std::ofstream(dir / "bad.pgm") << "P7\n1 1\n255\n";
  CHECK_THROWS_AS(read_pnm(dir / "bad.pgm"), FormatError);

  const auto t = image_to_tensor<double>(gray, 3);
  REQUIRE(t.shape() == Shape{3, 5, 3});
  CHECK(t[3 * 4 + 2] == doctest::Approx(68.0 / 255).epsilon(1e-15));
  CHECK(t[3 * 4 + 0] == t[3 * 4 + 2]);
  CHECK_THROWS_AS(image_to_tensor<double>(color, 1), FormatError);

  SUBCASE("clip directories stack sorted frames") {
    fs::create_directories(dir / "clip");
    Image second = gray;
    for (auto& p : second.pixels) p = static_cast<std::uint8_t>(255 - p);
    write_pnm(dir / "clip" / "frame_0001.pgm", second);
    write_pnm(dir / "clip" / "frame_0000.pgm", gray);
    const auto clip = load_clip<double>(dir / "clip", 1);
    REQUIRE(clip.shape() == Shape{2, 3, 5, 1});
    CHECK(clip[1] == 17.0 / 255);
    CHECK(clip[15 + 1] == 238.0 / 255);
    CHECK(load_clip<double>(dir / "clip", 0).shape() == Shape{2, 3, 5, 1});
    CHECK(load_clip<double>(dir / "clip" / "frame_0000.pgm", 0).shape() == Shape{1, 3, 5, 1});
    write_pnm(dir / "clip" / "frame_0002.pgm", Image{4, 3, 1, std::vector<std::uint8_t>(12, 0)});
    CHECK_THROWS_AS(load_clip<double>(dir / "clip", 1), FormatError);
  }

  SUBCASE("masks write 255 where set") {
    const std::vector<std::uint8_t> m{0, 1, 1, 0};
    const auto img = mask_to_image(2, 2, m);
    CHECK(img.pixels == std::vector<std::uint8_t>{0, 255, 255, 0});
  }
}

TEST_CASE("synthetic manipulations") {
  for (const auto kind : {ManipulationKind::copy_move, ManipulationKind::inpaint}) {
    const auto spec = small_spec(kind);
    const auto base = gen_synthetic(7, empty_target(spec));
    const auto s = gen_synthetic(7, spec);
    REQUIRE(s.frames.size() == 3);
    REQUIRE(s.masks.size() == 3);
    for (const auto& m : base.masks) CHECK(m.count() == 0);

    // frame 0 is outside the range: untouched and unmarked
    CHECK(s.frames[0] == base.frames[0]);
    CHECK(s.masks[0].count() == 0);
    for (std::size_t t = 1; t < 3; ++t) {
      CHECK(s.masks[t].count() == spec.target.area());
      bool target_changed = false;
      for (std::size_t y = 0; y < spec.height; ++y)
        for (std::size_t x = 0; x < spec.width; ++x) {
          const bool in = spec.target.contains(y, x);
          CHECK(s.masks[t].at(y, x) == (in ? 1 : 0));
          for (std::size_t c = 0; c < 3; ++c) {
            const auto i = (y * spec.width + x) * 3 + c;
            if (!in) {
              REQUIRE(s.frames[t].pixels[i] == base.frames[t].pixels[i]);
            } else {
              target_changed |= s.frames[t].pixels[i] != base.frames[t].pixels[i];
              if (kind == ManipulationKind::copy_move) {
                const auto sy = spec.source.y + y - spec.target.y, sx = spec.source.x + x - spec.target.x;
                REQUIRE(s.frames[t].pixels[i] == base.frames[t].pixels[(sy * spec.width + sx) * 3 + c]);
              }
            }
          }
        }
      CHECK(target_changed);
    }
  }

  SUBCASE("zero-area target leaves the clip untouched") {
    auto spec = small_spec(ManipulationKind::inpaint);
    spec.target.h = 0;
    const auto s = gen_synthetic(3, spec);
    const auto base = gen_synthetic(3, empty_target(spec));
    CHECK(s.frames == base.frames);
    for (const auto& m : s.masks) CHECK(m.count() == 0);
  }
  SUBCASE("copy-move onto itself changes nothing but is marked") {
    auto spec = small_spec(ManipulationKind::copy_move);
    spec.source = spec.target;
    const auto s = gen_synthetic(4, spec);
    CHECK(s.frames == gen_synthetic(4, empty_target(spec)).frames);
    CHECK(s.masks[1].count() == spec.target.area());
  }
  SUBCASE("deterministic in the seed") {
    const auto spec = small_spec(ManipulationKind::inpaint);
    CHECK(gen_synthetic(11, spec).frames == gen_synthetic(11, spec).frames);
    CHECK(gen_synthetic(11, spec).frames != gen_synthetic(12, spec).frames);
  }
  SUBCASE("invalid specs throw") {
    auto spec = small_spec(ManipulationKind::inpaint);
    spec.target = {20, 0, 6, 8};
    CHECK_THROWS_AS(gen_synthetic(1, spec), ShapeError);
    spec = small_spec(ManipulationKind::copy_move);
    spec.source.w = 7;
    CHECK_THROWS_AS(gen_synthetic(1, spec), ShapeError);
    spec = small_spec(ManipulationKind::copy_move);
    spec.frame_end = 4;
    CHECK_THROWS_AS(gen_synthetic(1, spec), ShapeError);
  }
  SUBCASE("flip mirrors frames and masks") {
    const auto s = gen_synthetic(5, small_spec(ManipulationKind::inpaint));
    const auto f = flip_horizontal(s);
    for (std::size_t x = 0; x < 32; ++x) {
      CHECK(f.masks[1].at(13, x) == s.masks[1].at(13, 31 - x));
      CHECK(f.frames[1].pixels[(13 * 32 + x) * 3] == s.frames[1].pixels[(13 * 32 + 31 - x) * 3]);
    }
  }
}

TEST_CASE("random specs and datasets") {
  DataConfig data;
  data.samples = 5;
  data.height = 48;
  data.width = 40;
  data.clip_len = 2;
  data.align = 8;
  data.min_rect = 8;
  data.max_rect = 24;
  CounterRng rng(3);
  for (int i = 0; i < 50; ++i) {
    const auto spec = random_spec(data, 3, rng);
    CHECK_NOTHROW(validate(spec));
    CHECK(spec.target.y % 8 == 0);
    CHECK(spec.target.h % 8 == 0);
    CHECK(spec.target.h >= 8);
    CHECK(spec.target.w <= 24);
  }
  const auto ds = generate_dataset(data, 3);
  REQUIRE(ds.size() == 5);
  const auto again = generate_dataset(data, 3);
  for (std::size_t i = 0; i < ds.size(); ++i) CHECK(ds[i].frames == again[i].frames);

  const auto dir = scratch("dataset");
  save_dataset(dir, ds);
  CHECK(fs::exists(dir / "sample_0000" / "masks" / "mask_0001.pgm"));
  const auto loaded = load_dataset(dir);
  REQUIRE(loaded.size() == ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(loaded[i].frames == ds[i].frames);
    for (std::size_t t = 0; t < ds[i].masks.size(); ++t) CHECK(loaded[i].masks[t] == ds[i].masks[t]);
    CHECK(loaded[i].spec.target == ds[i].spec.target);
    CHECK(loaded[i].spec.kind == ds[i].spec.kind);
  }
}

TEST_CASE("run config JSON round trip") {
  RunConfig r;
  r.model.dim = 32;
  r.model.low_dim = 8;
  r.model.global_relay = false;
  r.optim.lr = 3e-4;
  r.optim.accumulation_steps = 2;
  r.data.flips = true;
  r.data.samples = 7;
  r.edge_lambda = 5.5;
  r.steps = 12;
  r.seed = 9;
  const auto dir = scratch("config");
  save_run_config(r, (dir / "run.json").string());
  const auto back = load_run_config((dir / "run.json").string());
  CHECK(nlohmann::json(back) == nlohmann::json(r));
  CHECK(back.model.global_relay == false);
  CHECK(back.optim.lr == 3e-4);

  // missing keys fall back to defaults
  std::ofstream(dir / "partial.json") << R"({"steps": 3, "model": {"dim": 16, "heads": 2, "low_dim": 8}})";
  const auto partial = load_run_config((dir / "partial.json").string());
  CHECK(partial.steps == 3);
  CHECK(partial.model.heads == 2);
  CHECK(partial.model.layers == ModelConfig{}.layers);
  CHECK(partial.edge_lambda == RunConfig{}.edge_lambda);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  auto run = toy_run(1);
  run.optim.lr = 0.0;
  run.optim.min_lr = 0.0;
  run.optim.weight_decay = 0.05;
  run.steps = 3;
  const std::vector<SyntheticSample> ds{toy_sample(1)};
  const auto fresh = RelayModel<double>::init(run.model, run.seed);
  const auto result = train<double>(run, ds);
  CHECK(result.steps == 3);
  const auto a = fresh.named_parameters();
  const auto b = result.model.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    INFO(a[i].name);
    CHECK(oracle::max_abs_diff(a[i].tensor.data(), b[i].tensor.data()) == 0.0);
  }
}

TEST_CASE("single-sample loss decreases step by step") {
  for (const std::uint64_t seed : {1, 2, 3}) {
    const std::vector<SyntheticSample> ds{toy_sample(seed)};
    const auto result = train<double>(toy_run(seed), ds);
    REQUIRE(result.log.size() == 20);
    for (std::size_t i = 1; i < result.log.size(); ++i) {
      INFO("seed " << seed << " step " << i << ": " << result.log[i - 1].loss << " -> " << result.log[i].loss);
      CHECK(result.log[i].loss < result.log[i - 1].loss);
    }
  }
}

TEST_CASE("training is reproducible and logs a metrics CSV") {
  auto run = toy_run(4);
  run.steps = 4;
  run.optim.accumulation_steps = 2;
  const std::vector<SyntheticSample> ds{toy_sample(4), toy_sample(5)};
  std::size_t callbacks = 0;
  const auto a = train<double>(run, ds, [&](const EpochLog&) { ++callbacks; });
  const auto b = train<double>(run, ds);
  CHECK(a.steps == 4);
  CHECK(a.log.size() == 4);
  CHECK(callbacks == 4);
  const auto pa = a.model.named_parameters(), pb = b.model.named_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(oracle::max_abs_diff(pa[i].tensor.data(), pb[i].tensor.data()) == 0.0);

  const auto dir = scratch("csv");
  write_metrics_csv(dir / "m.csv", a.log);
  std::ifstream in(dir / "m.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,loss,f1,iou,lr");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 4);
  }
  CHECK(rows == 4);

  const auto m = evaluate(a.model, ds, false);
  REQUIRE(m.size() == 2);
  const auto avg = mean_metrics(m);
  CHECK(avg.f1 == doctest::Approx((m[0].f1 + m[1].f1) / 2));
  CHECK(avg.iou >= 0.0);
  CHECK(avg.iou <= 1.0);
}

TEST_CASE("checkpoint round trip") {
  auto cfg = gradcheck_model_config();
  auto model = RelayModel<double>::init(cfg, 21);
  // make every value distinctive, including the zero-initialised ones
  CounterRng rng(22);
  for (auto& p : model.named_parameters())
    for (auto& v : p.tensor.mutable_data()) v += 0.1 * rng.normal();
  const auto dir = scratch("checkpoint");
  save_checkpoint(dir, model, {{"note", "test"}});
  const auto manifest = read_manifest(dir);
  const auto counted = manifest_param_count(manifest);
  CHECK(counted.backbone == param_count(cfg).backbone);
  CHECK(counted.added == param_count(cfg).added);
  CHECK(manifest["extra"]["note"] == "test");
  CHECK(manifest["dtype"] == "f64");

  const auto loaded = load_checkpoint<double>(dir);
  const auto a = model.named_parameters(), b = loaded.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(oracle::max_abs_diff(a[i].tensor.data(), b[i].tensor.data()) == 0.0);

  const auto clip = oracle::random({2, 8, 16, 3}, 23);
  NoGradGuard no_grad;
  for (const bool one_shot : {false, true}) {
    const auto pa = forward(model, clip, one_shot), pb = forward(loaded, clip, one_shot);
    CHECK(oracle::max_abs_diff(pa.probabilities.data(), pb.probabilities.data()) == 0.0);
  }

  // saving twice gives identical bytes
  const auto dir2 = scratch("checkpoint2");
  save_checkpoint(dir2, loaded, {{"note", "test"}});
  CHECK(read_file(dir / "manifest.json") == read_file(dir2 / "manifest.json"));
  CHECK(read_file(dir / "tensors" / (a[0].name + ".rtns")) == read_file(dir2 / "tensors" / (a[0].name + ".rtns")));

  fs::remove(dir2 / "tensors" / (a[0].name + ".rtns"));
  CHECK_THROWS_AS(load_checkpoint<double>(dir2), FormatError);
  CHECK_THROWS_AS(read_manifest(scratch("empty")), FormatError);
}

TEST_CASE("grouped forward matches per-clip forward") {
  const auto cfg = gradcheck_model_config();
  const auto model = RelayModel<double>::init(cfg, 31);
  // 8x16 and 16x8 share a unit count, 16x16 does not
  const std::vector<Tensor<double>> clips{oracle::random({1, 8, 16, 3}, 32), oracle::random({1, 16, 16, 3}, 33),
                                          oracle::random({1, 16, 8, 3}, 34), oracle::random({1, 8, 16, 3}, 35)};
  NoGradGuard no_grad;
  for (const bool one_shot : {false, true}) {
    const auto grouped = forward_grouped(model, clips, one_shot);
    REQUIRE(grouped.size() == clips.size());
    for (std::size_t i = 0; i < clips.size(); ++i) {
      const auto single = forward(model, clips[i], one_shot);
      REQUIRE(grouped[i].probabilities.shape() == single.probabilities.shape());
      CHECK(oracle::max_abs_diff(grouped[i].probabilities.data(), single.probabilities.data()) < 1e-6);
    }
  }
}

TEST_CASE("input standardization is differentiable") {
  const auto cfg = gradcheck_model_config();
  Tensor<double> clip = oracle::random({1, 2, 3, 3}, 40, 1.0, true);
  const auto n = normalize_input(clip, cfg);
  CHECK(n[4] == (clip[4] - cfg.input_mean) / cfg.input_std);
  sum(n).backward();
  for (double g : clip.grad()) CHECK(g == 1.0 / cfg.input_std);
}
