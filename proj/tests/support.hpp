#pragma once

#include "ou3d/ou3d.hpp"

#include <gtest/gtest.h>

#include <random>

namespace ou3d::testing {

// Fresh directory under the build tree, removed on destruction.
class TempDir {
public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("ou3d-test-" + tag + "-" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "-" +
             std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
  std::filesystem::path path_;
};

inline PointCloud random_cloud(std::size_t n, std::uint64_t seed, int classes = 3, double extent = 10) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, extent);
  std::uniform_int_distribution<int> c(0, 255), l(0, classes - 1);
  PointCloud cloud;
  for (int k = 0; k < classes; ++k) cloud.class_names.push_back("class" + std::to_string(k));
  for (std::size_t i = 0; i < n; ++i) {
    cloud.positions.emplace_back(float(u(rng)), float(u(rng)), float(u(rng) * 0.3));
    cloud.colors.push_back({std::uint8_t(c(rng)), std::uint8_t(c(rng)), std::uint8_t(c(rng))});
    cloud.labels.push_back(l(rng));
  }
  return cloud;
}

// A small labeled block scene for fast pipeline runs.
inline PointCloud small_scene(std::uint64_t seed = 1, double density = 6) {
  return generate_scene(urban_scene_spec(seed, density, 16.0, 2));
}

inline PipelineConfig small_config() {
  PipelineConfig c;
  c.seed = 7;
  c.threads = 2;
  c.scene = {16.0, 6, 2};
  c.view.K = 2;
  c.view.height = c.view.width = 128;
  c.feature_dim = 16;
  c.train.epochs = 4;
  c.train.levels = 2;
  c.train.voxel_size = 0.5;
  return c;
}

inline std::vector<char> bytes_of(const std::filesystem::path& p) { return binio::slurp(p); }

}  // namespace ou3d::testing
