#pragma once

// Small shared fixtures: smooth random test images and temp directories.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "atlas_replay/image.hpp"

namespace fixtures {

/// Sum of a few anisotropic Gaussian blobs; smooth, asymmetric, values in [0,1].
inline atlas_replay::Image blob_image(std::size_t size, std::uint64_t seed, int blobs = 4) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(0.3 * size, 0.7 * size), width(0.06 * size, 0.14 * size), amp(0.4, 1.0);
  atlas_replay::Image img(size, size);
  for (int b = 0; b < blobs; ++b) {
    const double cx = pos(rng), cy = pos(rng), sx = width(rng), sy = width(rng), a = amp(rng);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = (x - cx) / sx, dy = (y - cy) / sy;
        img.at(y, x) += static_cast<float>(a * std::exp(-0.5 * (dx * dx + dy * dy)));
      }
  }
  return atlas_replay::normalize_intensity(img);
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& name) {
    path_ = std::filesystem::temp_directory_path() / ("atlas_replay_test_" + name + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::filesystem::path path_;
};

}  // namespace fixtures
