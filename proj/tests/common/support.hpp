#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mamc/image.hpp"

namespace testing {

inline mamc::Image random_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> data(static_cast<std::size_t>(h) * w * 3);
  for (auto& v : data) v = u(rng);
  return mamc::Image(h, w, std::move(data));
}

inline mamc::Image offset_image(const mamc::Image& img, float offset) {
  std::vector<float> data(img.data().begin(), img.data().end());
  for (auto& v : data) v = std::min(1.0f, std::max(0.0f, v + offset));
  return mamc::Image(img.height(), img.width(), std::move(data));
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& name) {
    path_ = std::filesystem::temp_directory_path() /
            ("mamc_" + name + "_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing
