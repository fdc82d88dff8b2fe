#include "relay/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

namespace relay {

std::string to_string(ManipulationKind kind) {
  return kind == ManipulationKind::copy_move ? "copy-move" : "inpaint";
}

void validate(const ManipulationSpec& spec) {
  const auto fail = [](const std::string& what) { throw ShapeError("manipulation spec: " + what); };
  if (spec.height == 0 || spec.width == 0 || spec.frames == 0) fail("empty frame");
  if (spec.channels != 1 && spec.channels != 3) fail("channels must be 1 or 3");
  const auto inside = [&](const Rect& r) { return r.y + r.h <= spec.height && r.x + r.w <= spec.width; };
  if (!inside(spec.target)) fail("target rectangle out of bounds");
  if (spec.kind == ManipulationKind::copy_move) {
    if (!inside(spec.source)) fail("source rectangle out of bounds");
    if (spec.source.h != spec.target.h || spec.source.w != spec.target.w) fail("source and target extents differ");
  }
  if (spec.frame_begin > spec.frame_end || spec.frame_end > spec.frames) fail("invalid frame range");
}

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

// Sum of oriented sinusoids per channel, in [0, 255] before noise.
std::vector<double> base_texture(const ManipulationSpec& spec, CounterRng& rng) {
  constexpr int kWaves = 5;
  std::vector<double> out(spec.height * spec.width * spec.channels);
  for (std::size_t c = 0; c < spec.channels; ++c) {
    const double offset = rng.uniform(70.0, 185.0);
    double fy[kWaves], fx[kWaves], phase[kWaves], amp[kWaves];
    for (int k = 0; k < kWaves; ++k) {
      const double freq = rng.uniform(0.02, 0.35);
      const double angle = rng.uniform(0.0, std::numbers::pi);
      fy[k] = freq * std::sin(angle);
      fx[k] = freq * std::cos(angle);
      phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
      amp[k] = rng.uniform(6.0, 22.0);
    }
    for (std::size_t y = 0; y < spec.height; ++y) {
      for (std::size_t x = 0; x < spec.width; ++x) {
        double v = offset;
        for (int k = 0; k < kWaves; ++k) v += amp[k] * std::sin(fy[k] * y + fx[k] * x + phase[k]);
        out[(y * spec.width + x) * spec.channels + c] = v;
      }
    }
  }
  return out;
}

// Coons-style blend of the pixels bordering the rectangle: each channel is
// the average of the horizontal and vertical linear interpolations between
// opposite borders. Borders outside the frame fall back to the nearest edge.
void inpaint_rect(Image& img, const Rect& r) {
  const std::size_t C = img.channels, W = img.width;
  const auto px = [&](long y, long x, std::size_t c) {
    y = std::clamp<long>(y, 0, static_cast<long>(img.height) - 1);
    x = std::clamp<long>(x, 0, static_cast<long>(W) - 1);
    return static_cast<double>(img.pixels[(static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)) * C + c]);
  };
  const long top = static_cast<long>(r.y) - 1, bottom = static_cast<long>(r.y + r.h);
  const long left = static_cast<long>(r.x) - 1, right = static_cast<long>(r.x + r.w);
  std::vector<std::uint8_t> fill(r.area() * C);
  for (std::size_t i = 0; i < r.h; ++i) {
    for (std::size_t j = 0; j < r.w; ++j) {
      const long y = static_cast<long>(r.y + i), x = static_cast<long>(r.x + j);
      const double ty = static_cast<double>(i + 1) / static_cast<double>(r.h + 1);
      const double tx = static_cast<double>(j + 1) / static_cast<double>(r.w + 1);
      for (std::size_t c = 0; c < C; ++c) {
        const double vertical = (1 - ty) * px(top, x, c) + ty * px(bottom, x, c);
        const double horizontal = (1 - tx) * px(y, left, c) + tx * px(y, right, c);
        fill[(i * r.w + j) * C + c] = to_byte(0.5 * (vertical + horizontal));
      }
    }
  }
  for (std::size_t i = 0; i < r.h; ++i) {
    std::copy_n(fill.begin() + static_cast<long>(i * r.w * C), r.w * C,
                img.pixels.begin() + static_cast<long>(((r.y + i) * W + r.x) * C));
  }
}

void copy_rect(Image& img, const Rect& src, const Rect& dst) {
  const Image original = img;
  const std::size_t C = img.channels, W = img.width;
  for (std::size_t i = 0; i < dst.h; ++i) {
    std::copy_n(original.pixels.begin() + static_cast<long>(((src.y + i) * W + src.x) * C), dst.w * C,
                img.pixels.begin() + static_cast<long>(((dst.y + i) * W + dst.x) * C));
  }
}

}  // namespace

SyntheticSample gen_synthetic(std::uint64_t seed, const ManipulationSpec& spec) {
  validate(spec);
  CounterRng texture_rng(seed, 0);
  const auto base = base_texture(spec, texture_rng);
  SyntheticSample s;
  s.spec = spec;
  for (std::size_t t = 0; t < spec.frames; ++t) {
    CounterRng noise_rng(seed, 1 + t);
    Image img;
    img.height = spec.height;
    img.width = spec.width;
    img.channels = spec.channels;
    img.pixels.resize(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) img.pixels[i] = to_byte(base[i] + 6.0 * noise_rng.normal());
    BinaryMask mask(spec.height, spec.width);
    if (t >= spec.frame_begin && t < spec.frame_end && spec.target.area() > 0) {
      if (spec.kind == ManipulationKind::copy_move) {
        copy_rect(img, spec.source, spec.target);
      } else {
        inpaint_rect(img, spec.target);
      }
      for (std::size_t y = spec.target.y; y < spec.target.y + spec.target.h; ++y) {
        for (std::size_t x = spec.target.x; x < spec.target.x + spec.target.w; ++x) mask.at(y, x) = 1;
      }
    }
    s.frames.push_back(std::move(img));
    s.masks.push_back(std::move(mask));
  }
  return s;
}

ManipulationSpec random_spec(const DataConfig& data, std::size_t channels, CounterRng& rng) {
  ManipulationSpec spec;
  spec.height = data.height;
  spec.width = data.width;
  spec.channels = channels;
  spec.frames = data.clip_len;
  spec.kind = rng.uniform() < 0.5 ? ManipulationKind::copy_move : ManipulationKind::inpaint;
  const std::size_t a = data.align;
  const auto side = [&] {
    const std::size_t lo = (data.min_rect + a - 1) / a, hi = data.max_rect / a;
    if (lo > hi) throw ShapeError("random_spec: no aligned rectangle side in [min_rect, max_rect]");
    return static_cast<std::size_t>(rng.range(lo, hi)) * a;
  };
  const auto place = [&](std::size_t h, std::size_t w) {
    Rect r;
    r.h = h;
    r.w = w;
    r.y = static_cast<std::size_t>(rng.range(0, (data.height - h) / a)) * a;
    r.x = static_cast<std::size_t>(rng.range(0, (data.width - w) / a)) * a;
    return r;
  };
  const std::size_t h = side(), w = side();
  spec.target = place(h, w);
  spec.source = place(h, w);
  for (int attempt = 0; attempt < 64 && spec.source.overlaps(spec.target); ++attempt) spec.source = place(h, w);
  spec.frame_begin = static_cast<std::size_t>(rng.range(0, data.clip_len - 1));
  spec.frame_end = static_cast<std::size_t>(rng.range(spec.frame_begin + 1, data.clip_len));
  return spec;
}

SyntheticSample flip_horizontal(const SyntheticSample& s) {
  SyntheticSample out = s;
  const std::size_t H = s.spec.height, W = s.spec.width, C = s.spec.channels;
  for (std::size_t t = 0; t < s.frames.size(); ++t) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        for (std::size_t c = 0; c < C; ++c) {
          out.frames[t].pixels[(y * W + x) * C + c] = s.frames[t].pixels[(y * W + (W - 1 - x)) * C + c];
        }
        out.masks[t].at(y, x) = s.masks[t].at(y, W - 1 - x);
      }
    }
  }
  const auto mirror = [W](Rect r) {
    r.x = W - r.x - r.w;
    return r;
  };
  out.spec.source = mirror(s.spec.source);
  out.spec.target = mirror(s.spec.target);
  return out;
}

std::vector<SyntheticSample> generate_dataset(const DataConfig& data, std::size_t channels) {
  std::vector<SyntheticSample> out;
  out.reserve(data.samples);
  for (std::size_t i = 0; i < data.samples; ++i) {
    CounterRng rng(data.seed, i);
    const std::uint64_t seed = rng.next_u64();
    auto sample = gen_synthetic(seed, random_spec(data, channels, rng));
    if (data.flips && rng.uniform() < 0.5) sample = flip_horizontal(sample);
    out.push_back(std::move(sample));
  }
  return out;
}

void to_json(nlohmann::json& j, const ManipulationSpec& s) {
  const auto rect = [](const Rect& r) { return nlohmann::json{{"y", r.y}, {"x", r.x}, {"h", r.h}, {"w", r.w}}; };
  j = nlohmann::json{{"height", s.height},       {"width", s.width},          {"channels", s.channels},
                     {"frames", s.frames},       {"kind", to_string(s.kind)}, {"source", rect(s.source)},
                     {"target", rect(s.target)}, {"frame_begin", s.frame_begin}, {"frame_end", s.frame_end}};
}

void from_json(const nlohmann::json& j, ManipulationSpec& s) {
  const auto rect = [](const nlohmann::json& r) {
    return Rect{r.at("y").get<std::size_t>(), r.at("x").get<std::size_t>(), r.at("h").get<std::size_t>(),
                r.at("w").get<std::size_t>()};
  };
  s.height = j.at("height");
  s.width = j.at("width");
  s.channels = j.at("channels");
  s.frames = j.at("frames");
  const std::string kind = j.at("kind");
  if (kind != "copy-move" && kind != "inpaint") throw FormatError("unknown manipulation kind " + kind);
  s.kind = kind == "copy-move" ? ManipulationKind::copy_move : ManipulationKind::inpaint;
  s.source = rect(j.at("source"));
  s.target = rect(j.at("target"));
  s.frame_begin = j.at("frame_begin");
  s.frame_end = j.at("frame_end");
}

namespace {

std::string numbered(const char* prefix, std::size_t i, const char* ext = "") {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04zu%s", prefix, i, ext);
  return buf;
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const std::vector<SyntheticSample>& samples) {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const auto sdir = dir / numbered("sample", i);
    std::filesystem::create_directories(sdir / "masks");
    for (std::size_t t = 0; t < s.frames.size(); ++t) {
      write_pnm(sdir / numbered("frame", t, s.spec.channels == 1 ? ".pgm" : ".ppm"), s.frames[t]);
      write_pnm(sdir / "masks" / numbered("mask", t, ".pgm"),
                mask_to_image(s.masks[t].height, s.masks[t].width, s.masks[t].values));
    }
    std::ofstream out(sdir / "spec.json");
    if (!out) throw FormatError("cannot write " + (sdir / "spec.json").string());
    out << nlohmann::json(s.spec).dump(2) << "\n";
  }
}

std::vector<SyntheticSample> load_dataset(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> dirs;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_directory() && entry.path().filename().string().starts_with("sample_")) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<SyntheticSample> out;
  for (const auto& sdir : dirs) {
    SyntheticSample s;
    std::ifstream in(sdir / "spec.json");
    if (!in) throw FormatError("missing spec.json in " + sdir.string());
    s.spec = nlohmann::json::parse(in).get<ManipulationSpec>();
    for (const auto& f : list_frames(sdir)) s.frames.push_back(read_pnm(f));
    for (const auto& f : list_frames(sdir / "masks")) {
      const Image img = read_pnm(f);
      if (img.channels != 1) throw FormatError("mask " + f.string() + " must be single-channel");
      BinaryMask m(img.height, img.width);
      for (std::size_t k = 0; k < img.pixels.size(); ++k) m.values[k] = img.pixels[k] >= 128 ? 1 : 0;
      s.masks.push_back(std::move(m));
    }
    if (s.frames.size() != s.spec.frames || s.masks.size() != s.spec.frames) {
      throw FormatError("sample " + sdir.string() + " has inconsistent frame/mask counts");
    }
    out.push_back(std::move(s));
  }
  if (out.empty()) throw FormatError("no samples in " + dir.string());
  return out;
}

}  // namespace relay
