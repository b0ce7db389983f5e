#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "bonecheck/error.hpp"
#include "bonecheck/rng.hpp"
#include "bonecheck/tensor.hpp"

namespace bonecheck {

/// 8-bit single-channel image, row-major.
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};

/// 8-bit interleaved RGB image, row-major.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // size 3 * width * height
};

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

/// Decodes a PNG (gray, gray+alpha, RGB, RGBA, palette, 8 or 16 bit) to 8-bit
/// gray. Color images are converted to luminance by libpng.
inline GrayImage decode_png(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>") {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw FormatError("cannot decode PNG " + source + ": " + image.message);
  }
  image.format = PNG_FORMAT_GRAY;
  GrayImage out;
  out.width = image.width;
  out.height = image.height;
  out.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw FormatError("cannot decode PNG " + source + ": " + msg);
  }
  return out;
}

inline GrayImage read_png(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const DataError& e) {
    throw FormatError(std::string("unreadable image: ") + e.what());
  }
  return decode_png(bytes, path.string());
}

namespace detail {

inline std::vector<std::uint8_t> encode_png(const std::uint8_t* pixels, std::size_t width, std::size_t height,
                                            png_uint_32 format) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = format;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, pixels, 0, nullptr)) {
    throw FormatError(std::string("PNG encode failed: ") + image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, pixels, 0, nullptr)) {
    throw FormatError(std::string("PNG encode failed: ") + image.message);
  }
  out.resize(size);
  return out;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_png(const GrayImage& img) {
  return detail::encode_png(img.pixels.data(), img.width, img.height, PNG_FORMAT_GRAY);
}

inline std::vector<std::uint8_t> encode_png(const RgbImage& img) {
  return detail::encode_png(img.pixels.data(), img.width, img.height, PNG_FORMAT_RGB);
}

/// Bilinear resampling with half-pixel centers and edge clamping. A same-size
/// resize is the identity and a constant image stays constant.
template <typename T>
std::vector<T> resize_bilinear(std::span<const T> src, std::size_t H, std::size_t W, std::size_t out_h,
                               std::size_t out_w) {
  if (H == 0 || W == 0 || out_h == 0 || out_w == 0) throw ShapeError("resize: empty image or target");
  std::vector<T> out(out_h * out_w);
  const double sy = static_cast<double>(H) / static_cast<double>(out_h);
  const double sx = static_cast<double>(W) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double tx = fx - static_cast<double>(x0);
      const double top = src[y0 * W + x0] * (1 - tx) + src[y0 * W + x1] * tx;
      const double bottom = src[y1 * W + x0] * (1 - tx) + src[y1 * W + x1] * tx;
      out[y * out_w + x] = static_cast<T>(top * (1 - ty) + bottom * ty);
    }
  }
  return out;
}

/// Resizes to `target` (H,W) and multiplies by `rescale`. Returns (1,H,W).
template <typename T = float>
Tensor<T> to_tensor(const GrayImage& img, std::size_t target_h, std::size_t target_w, double rescale = 1.0 / 255.0) {
  std::vector<double> src(img.pixels.begin(), img.pixels.end());
  std::vector<double> resized = resize_bilinear<double>(src, img.height, img.width, target_h, target_w);
  std::vector<T> values(resized.size());
  for (std::size_t i = 0; i < resized.size(); ++i) values[i] = static_cast<T>(resized[i] * rescale);
  return Tensor<T>({1, target_h, target_w}, std::move(values));
}

/// Reads a PNG, resizes bilinearly and rescales by 1/255 into [0,1].
template <typename T = float>
Tensor<T> load_image(const std::filesystem::path& path, std::size_t target_h, std::size_t target_w) {
  return to_tensor<T>(read_png(path), target_h, target_w);
}

/// Mirrors every channel of a (C,H,W) tensor about the vertical axis.
template <typename T>
Tensor<T> flip_horizontal(const Tensor<T>& img) {
  if (img.rank() != 3) throw ShapeError("flip_horizontal expects (C,H,W), got " + shape_string(img.shape()));
  Tensor<T> out = img;
  const std::size_t rows = img.dim(0) * img.dim(1), W = img.dim(2);
  for (std::size_t r = 0; r < rows; ++r) std::reverse(out.data() + r * W, out.data() + (r + 1) * W);
  return out;
}

/// Rotates a (C,H,W) tensor counter-clockwise by `degrees` about the image
/// center. Bilinear sampling; out-of-image samples take the nearest edge value.
template <typename T>
Tensor<T> rotate(const Tensor<T>& img, double degrees) {
  if (img.rank() != 3) throw ShapeError("rotate expects (C,H,W), got " + shape_string(img.shape()));
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const double rad = degrees * 3.14159265358979323846 / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  const double cx = (static_cast<double>(W) - 1) / 2, cy = (static_cast<double>(H) - 1) / 2;
  Tensor<T> out(img.shape());
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      // Inverse mapping: output (x,y) samples the source at R(-angle)·(dx,dy).
      const double fx = std::clamp(c * dx - s * dy + cx, 0.0, static_cast<double>(W - 1));
      const double fy = std::clamp(s * dx + c * dy + cy, 0.0, static_cast<double>(H - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), y0 = static_cast<std::size_t>(fy);
      const std::size_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
      const double tx = fx - static_cast<double>(x0), ty = fy - static_cast<double>(y0);
      for (std::size_t ch = 0; ch < C; ++ch) {
        const T* p = img.data() + ch * H * W;
        const double top = p[y0 * W + x0] * (1 - tx) + p[y0 * W + x1] * tx;
        const double bottom = p[y1 * W + x0] * (1 - tx) + p[y1 * W + x1] * tx;
        out[ch * H * W + y * W + x] = static_cast<T>(top * (1 - ty) + bottom * ty);
      }
    }
  }
  return out;
}

/// Training-time augmentation settings. Validation data only gets rescale and resize.
struct AugmentationConfig {
  double rescale = 1.0 / 255.0;
  double horizontal_flip_prob = 0.5;
  double rotation_range_deg = 45.0;
  std::size_t target_h = 64;
  std::size_t target_w = 64;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(horizontal_flip_prob >= 0 && horizontal_flip_prob <= 1)) {
      throw InvalidArgument("horizontal_flip_prob must lie in [0,1]");
    }
    if (!(rotation_range_deg >= 0)) throw InvalidArgument("rotation_range_deg must be non-negative");
    if (target_h == 0 || target_w == 0) throw InvalidArgument("augmentation target size must be positive");
  }
};

/// One concrete draw of the random transform.
struct AugmentationDraw {
  bool flip = false;
  double angle_deg = 0.0;
};

inline AugmentationDraw draw_augmentation(const AugmentationConfig& cfg, Rng& rng) {
  AugmentationDraw d;
  d.flip = rng.bernoulli(cfg.horizontal_flip_prob);
  d.angle_deg = rng.uniform(-cfg.rotation_range_deg, cfg.rotation_range_deg);
  return d;
}

template <typename T>
Tensor<T> apply_augmentation(const Tensor<T>& image, const AugmentationDraw& d) {
  Tensor<T> out = d.flip ? flip_horizontal(image) : image;
  if (d.angle_deg != 0.0) out = rotate(out, d.angle_deg);
  return out;
}

/// Random horizontal flip (probability `horizontal_flip_prob`) followed by a
/// rotation drawn uniformly from [-range, +range] degrees.
template <typename T>
Tensor<T> augment(const Tensor<T>& image, const AugmentationConfig& cfg, Rng& rng) {
  cfg.validate();
  return apply_augmentation(image, draw_augmentation(cfg, rng));
}

}  // namespace bonecheck
