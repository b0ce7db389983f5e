#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unistd.h>
#include <vector>

#include "bonecheck/image.hpp"
#include "bonecheck/rng.hpp"
#include "bonecheck/tensor.hpp"

namespace testing_support {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "bonecheck") {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter.fetch_add(1)));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& child) const { return path_ / child; }

 private:
  fs::path path_;
};

template <typename T>
bonecheck::Tensor<T> random_tensor(bonecheck::Shape shape, bonecheck::Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(bonecheck::shape_size(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return bonecheck::Tensor<T>(std::move(shape), std::move(v));
}

/// Values bounded away from zero so ReLU and max-pool kinks are not probed.
template <typename T>
bonecheck::Tensor<T> random_away_from_zero(bonecheck::Shape shape, bonecheck::Rng& rng, double margin = 0.1) {
  std::vector<T> v(bonecheck::shape_size(shape));
  for (auto& x : v) {
    const double mag = rng.uniform(margin, 1.0);
    x = static_cast<T>(rng.bernoulli(0.5) ? mag : -mag);
  }
  return bonecheck::Tensor<T>(std::move(shape), std::move(v));
}

inline bonecheck::GrayImage gradient_image(std::size_t w, std::size_t h) {
  bonecheck::GrayImage img{w, h, std::vector<std::uint8_t>(w * h)};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) img.pixels[y * w + x] = static_cast<std::uint8_t>((x * 7 + y * 13) % 256);
  return img;
}

}  // namespace testing_support
