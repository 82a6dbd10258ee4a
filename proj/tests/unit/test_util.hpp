#pragma once

#include <gtest/gtest.h>
#include <torch/torch.h>

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "diredi/dataset.hpp"
#include "diredi/detector.hpp"

namespace diredi::testing {

// Small enough that a forward pass over a 64x64 batch is a few milliseconds.
inline DetectorConfig tiny_config(std::vector<std::string> categories, int neck_channels = 8) {
  DetectorConfig c = DetectorConfig::preset(Tier::toy, {});
  c.backbone_channel_plan = {4, 8, 8, 16, 16};
  c.blocks_per_stage = 1;
  c.neck_channels = neck_channels;
  c.head_conv_depth = 1;
  c.head_norm_groups = 4;
  c.scale_bounds = {0.f, 16.f, 32.f, std::numeric_limits<float>::infinity()};
  c.num_classes = static_cast<int>(categories.size());
  c.categories = std::move(categories);
  return c;
}

inline DetectionDataset tiny_dataset(int images, std::vector<std::string> classes, std::uint64_t seed) {
  ToySpec spec;
  spec.num_images = images;
  spec.classes = std::move(classes);
  spec.seed = seed;
  return generate_toy_dataset(spec);
}

// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = std::filesystem::temp_directory_path() /
            ("diredi_" + std::string(info->test_suite_name()) + "_" + info->name() + "_" +
             std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

inline bool bit_equal(const torch::Tensor& a, const torch::Tensor& b) {
  return a.scalar_type() == b.scalar_type() && a.sizes() == b.sizes() && torch::equal(a, b);
}

}  // namespace diredi::testing
