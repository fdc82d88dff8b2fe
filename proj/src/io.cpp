#include "relay/io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace relay {

namespace {

constexpr char kMagic[4] = {'R', 'T', 'N', 'S'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_le(std::ostream& out, T value) {
  std::uint8_t bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  std::uint8_t bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw FormatError("rtns: truncated stream");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

template <typename Scalar>
void write_impl(std::ostream& out, const Shape& shape, std::span<const Scalar> values) {
  if (numel(shape) != values.size()) throw FormatError("rtns: shape does not match payload");
  if (shape.size() > 255) throw FormatError("rtns: too many dimensions");
  out.write(kMagic, 4);
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(ScalarTraits<Scalar>::dtype));
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(shape.size()));
  for (const std::size_t d : shape) put_le<std::uint64_t>(out, d);
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (const Scalar v : values) put_le<Scalar>(out, v);
  }
  if (!out) throw FormatError("rtns: write failed");
}

template <typename Scalar>
void save_impl(const std::filesystem::path& path, const Shape& shape, std::span<const Scalar> values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_impl(out, shape, values);
}

}  // namespace

void write_rtns(std::ostream& out, const Shape& shape, std::span<const float> values) { write_impl(out, shape, values); }
void write_rtns(std::ostream& out, const Shape& shape, std::span<const double> values) { write_impl(out, shape, values); }

RawTensor read_rtns(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("rtns: bad magic");
  const auto version = get_le<std::uint32_t>(in);
  if (version != kVersion) throw FormatError("rtns: unsupported version " + std::to_string(version));
  const auto code = get_le<std::uint8_t>(in);
  if (code > 1) throw FormatError("rtns: unknown dtype code " + std::to_string(code));
  const auto ndim = get_le<std::uint8_t>(in);
  RawTensor raw;
  raw.dtype = static_cast<DType>(code);
  for (std::size_t i = 0; i < ndim; ++i) raw.shape.push_back(static_cast<std::size_t>(get_le<std::uint64_t>(in)));
  const std::size_t n = numel(raw.shape);
  raw.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    raw.values[i] = raw.dtype == DType::f32 ? static_cast<double>(get_le<float>(in)) : get_le<double>(in);
  }
  return raw;
}

void save_rtns_file(const std::filesystem::path& path, const Shape& shape, std::span<const float> values) {
  save_impl(path, shape, values);
}
void save_rtns_file(const std::filesystem::path& path, const Shape& shape, std::span<const double> values) {
  save_impl(path, shape, values);
}

RawTensor load_rtns_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return read_rtns(in);
}

// ---------------------------------------------------------------------------
// PNM

namespace {

std::string next_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string rest;
      std::getline(in, rest);
      if (!tok.empty()) break;
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  if (tok.empty()) throw FormatError("pnm: unexpected end of header");
  return tok;
}

std::size_t parse_size(const std::string& tok) {
  std::size_t pos = 0;
  const unsigned long long v = std::stoull(tok, &pos);
  if (pos != tok.size()) throw FormatError("pnm: bad number '" + tok + "'");
  return static_cast<std::size_t>(v);
}

}  // namespace

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  const std::string magic = next_token(in);
  const bool binary = magic == "P5" || magic == "P6";
  if (magic != "P2" && magic != "P3" && !binary) throw FormatError("pnm: unsupported magic " + magic);
  Image img;
  img.channels = (magic == "P3" || magic == "P6") ? 3 : 1;
  img.width = parse_size(next_token(in));
  img.height = parse_size(next_token(in));
  const std::size_t maxval = parse_size(next_token(in));
  if (img.width == 0 || img.height == 0) throw FormatError("pnm: empty image");
  if (maxval == 0 || maxval > 255) throw FormatError("pnm: only 8-bit images are supported");
  const std::size_t n = img.width * img.height * img.channels;
  img.pixels.resize(n);
  if (binary) {
    if (!in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(n))) {
      throw FormatError("pnm: truncated pixel data in " + path.string());
    }
  } else {
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(parse_size(next_token(in)));
  }
  if (maxval != 255) {
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>((p * 255 + maxval / 2) / maxval);
  }
  return img;
}

void write_pnm(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw FormatError("pnm: need 1 or 3 channels");
  if (image.pixels.size() != image.width * image.height * image.channels) throw FormatError("pnm: pixel count mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << (image.channels == 1 ? "P5" : "P6") << "\n" << image.width << " " << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw FormatError("pnm: write failed for " + path.string());
}

std::vector<std::filesystem::path> list_frames(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const auto ext = entry.path().extension().string();
    if (entry.is_regular_file() && (ext == ".pgm" || ext == ".ppm" || ext == ".pnm")) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

Image mask_to_image(std::size_t height, std::size_t width, std::span<const std::uint8_t> mask) {
  if (mask.size() != height * width) throw FormatError("mask_to_image: size mismatch");
  Image img;
  img.height = height;
  img.width = width;
  img.channels = 1;
  img.pixels.resize(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) img.pixels[i] = mask[i] ? 255 : 0;
  return img;
}

}  // namespace relay
