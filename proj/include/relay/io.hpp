#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "relay/tensor.hpp"

namespace relay {

/// Tensor container: "RTNS", u32 version (1), u8 dtype (0 = f32, 1 = f64),
/// u8 ndim, ndim u64 extents, then the row-major payload. All little-endian.
struct RawTensor {
  DType dtype = DType::f32;
  Shape shape;
  std::vector<double> values;  // widened from the stored dtype
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_rtns(std::ostream& out, const Shape& shape, std::span<const float> values);
void write_rtns(std::ostream& out, const Shape& shape, std::span<const double> values);
RawTensor read_rtns(std::istream& in);

void save_rtns_file(const std::filesystem::path& path, const Shape& shape, std::span<const float> values);
void save_rtns_file(const std::filesystem::path& path, const Shape& shape, std::span<const double> values);
RawTensor load_rtns_file(const std::filesystem::path& path);

template <typename Scalar>
void save_tensor(const std::filesystem::path& path, const Tensor<Scalar>& t) {
  save_rtns_file(path, t.shape(), t.data());
}

template <typename Scalar>
Tensor<Scalar> to_tensor(const RawTensor& raw) {
  std::vector<Scalar> values(raw.values.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<Scalar>(raw.values[i]);
  return Tensor<Scalar>(raw.shape, std::move(values));
}

template <typename Scalar>
Tensor<Scalar> load_tensor(const std::filesystem::path& path) {
  return to_tensor<Scalar>(load_rtns_file(path));
}

/// 8-bit PGM (1 channel) or PPM (3 channel) image.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved channels

  bool operator==(const Image&) const = default;
};

/// Reads binary (P5/P6) or ASCII (P2/P3) PNM with maxval <= 255.
Image read_pnm(const std::filesystem::path& path);
/// Writes P5 for one channel, P6 for three.
void write_pnm(const std::filesystem::path& path, const Image& image);

/// Image files (.pgm/.ppm) in a directory, sorted by name.
std::vector<std::filesystem::path> list_frames(const std::filesystem::path& dir);

/// [H, W, C] tensor scaled to [0, 1]; gray images are replicated when
/// `channels` is 3, and `channels` 0 keeps the image's own count.
template <typename Scalar>
Tensor<Scalar> image_to_tensor(const Image& img, std::size_t channels) {
  if (channels == 0) channels = img.channels;
  if (img.channels != channels && !(img.channels == 1 && channels == 3)) {
    throw FormatError("image has " + std::to_string(img.channels) + " channels, expected " + std::to_string(channels));
  }
  std::vector<Scalar> values(img.height * img.width * channels);
  for (std::size_t p = 0; p < img.height * img.width; ++p) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::uint8_t v = img.pixels[p * img.channels + (img.channels == 1 ? 0 : c)];
      values[p * channels + c] = static_cast<Scalar>(v) / Scalar(255);
    }
  }
  return Tensor<Scalar>(Shape{img.height, img.width, channels}, std::move(values));
}

/// Single image file or directory of numbered frames -> clip [T, H, W, C].
template <typename Scalar>
Tensor<Scalar> load_clip(const std::filesystem::path& path, std::size_t channels) {
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(path)) {
    files = list_frames(path);
  } else {
    files.push_back(path);
  }
  if (files.empty()) throw FormatError("no frames found at " + path.string());
  std::vector<Scalar> values;
  std::size_t h = 0, w = 0;
  for (const auto& f : files) {
    const auto frame = image_to_tensor<Scalar>(read_pnm(f), channels);
    if (values.empty()) {
      h = frame.dim(0);
      w = frame.dim(1);
      channels = frame.dim(2);
    } else if (frame.dim(0) != h || frame.dim(1) != w) {
      throw FormatError("frame " + f.string() + " has different extents");
    }
    values.insert(values.end(), frame.data().begin(), frame.data().end());
  }
  return Tensor<Scalar>(Shape{files.size(), h, w, channels}, std::move(values));
}

/// 8-bit single-channel image, 255 where mask is set.
Image mask_to_image(std::size_t height, std::size_t width, std::span<const std::uint8_t> mask);

}  // namespace relay
