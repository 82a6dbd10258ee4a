#pragma once

#include <torch/torch.h>

#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

namespace diredi {

enum class Tier { large, tutor, edge, toy };

std::string to_string(Tier tier);
Tier tier_from_string(const std::string& name);

// Trainable parameters live in exactly one of these namespaces.
enum class Part { backbone, neck, head };

std::string to_string(Part part);
Part part_from_string(const std::string& name);
// Classifies a fully-qualified parameter name ("neck.lateral.0.weight").
Part part_of(const std::string& parameter_name);

struct DetectorConfig {
  Tier tier = Tier::toy;
  int num_classes = 1;
  // Category names in head-row order. Empty means anonymous classes.
  std::vector<std::string> categories;
  int in_channels = 3;
  // Output channels of each stride-2 backbone stage; stage s has stride 2^(s+1).
  std::vector<int> backbone_channel_plan{8, 16, 32, 48, 64};
  int blocks_per_stage = 1;
  int neck_channels = 32;
  std::vector<int> strides{8, 16, 32};
  // Level l is responsible for regression extents in (scale_bounds[l], scale_bounds[l+1]].
  // Size strides.size() + 1; the last entry may be +inf.
  std::vector<float> scale_bounds{0.f, 64.f, 128.f, std::numeric_limits<float>::infinity()};
  int head_conv_depth = 2;
  int head_norm_groups = 8;

  void validate() const;
  int max_stride() const { return strides.back(); }
  // Index of the backbone stage feeding pyramid level `level`.
  int stage_for_level(std::size_t level) const;

  // Channel plans for the three-tier hierarchy plus the toy tier.
  static DetectorConfig preset(Tier tier, std::vector<std::string> categories);

  nlohmann::json to_json() const;
  static DetectorConfig from_json(const nlohmann::json& j);
};

// Multi-scale neck output. levels[l] has shape [B, C, H_l, W_l].
struct FeaturePyramid {
  std::vector<int> strides;
  std::vector<torch::Tensor> levels;

  std::size_t size() const { return levels.size(); }
};

// Per-level head predictions. Box regression is the left/top/right/bottom
// distance from each location in stride-normalized units (always > 0).
struct HeadOutputs {
  std::vector<torch::Tensor> class_logits;       // [B, K, H, W]
  std::vector<torch::Tensor> centerness_logits;  // [B, 1, H, W]
  std::vector<torch::Tensor> box_regression;     // [B, 4, H, W]
};

struct ForwardResult {
  FeaturePyramid pyramid;
  HeadOutputs head;
};

class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(const DetectorConfig& cfg);
  std::vector<torch::Tensor> forward(torch::Tensor x);

 private:
  torch::nn::ModuleList stages_{nullptr};
};
TORCH_MODULE(Backbone);

// Lateral 1x1, top-down nearest upsampling, 3x3 smoothing.
class NeckImpl : public torch::nn::Module {
 public:
  NeckImpl(const std::vector<int>& in_channels, int out_channels);
  std::vector<torch::Tensor> forward(const std::vector<torch::Tensor>& inputs);

 private:
  torch::nn::ModuleList lateral_{nullptr};
  torch::nn::ModuleList output_{nullptr};
};
TORCH_MODULE(Neck);

class HeadImpl : public torch::nn::Module {
 public:
  HeadImpl(int channels, int num_classes, int depth, int groups, int num_levels);
  HeadOutputs forward(const std::vector<torch::Tensor>& features);

  torch::nn::Conv2d& cls_logits() { return cls_logits_; }

 private:
  torch::nn::Sequential cls_tower_{nullptr};
  torch::nn::Sequential box_tower_{nullptr};
  torch::nn::Conv2d cls_logits_{nullptr};
  torch::nn::Conv2d box_pred_{nullptr};
  torch::nn::Conv2d centerness_{nullptr};
  torch::Tensor scales_;
};
TORCH_MODULE(Head);

// Prior probability behind the classification bias initialisation.
inline constexpr double kClassPrior = 0.01;

class DetectorImpl : public torch::nn::Module {
 public:
  // Parameters are drawn from the global torch generator; use
  // build_detector() for seeded construction.
  explicit DetectorImpl(DetectorConfig cfg, std::uint64_t seed = 0);

  // Pure in eval mode. Inputs whose spatial size is not a multiple of the
  // largest stride are zero-padded on the bottom/right.
  ForwardResult forward(torch::Tensor images);
  FeaturePyramid features(torch::Tensor images);

  const DetectorConfig& config() const { return config_; }
  // Relabels head rows in place; the row count must not change.
  void rename_categories(std::vector<std::string> names);
  std::uint64_t seed() const { return seed_; }
  nlohmann::json& provenance() { return provenance_; }
  const nlohmann::json& provenance() const { return provenance_; }

  // Parameters (trainable) belonging to one namespace, in name order.
  std::vector<std::pair<std::string, torch::Tensor>> named_part_parameters(Part part) const;
  std::int64_t parameter_count() const;

  Backbone& backbone() { return backbone_; }
  Neck& neck() { return neck_; }
  Head& head() { return head_; }

 private:
  DetectorConfig config_;
  std::uint64_t seed_;
  nlohmann::json provenance_ = nlohmann::json::array();
  Backbone backbone_{nullptr};
  Neck neck_{nullptr};
  Head head_{nullptr};
};
TORCH_MODULE(Detector);

// Builds a detector whose parameters are a pure function of (config, seed).
Detector build_detector(const DetectorConfig& config, std::uint64_t seed);

// Deep copy with independent storage.
Detector clone_detector(const Detector& detector);

// Copy of `detector` whose classification head covers `categories`:
// rows of retained categories are copied by name, new rows are initialised
// fresh from `init_seed` (deterministic per category name).
Detector with_categories(const Detector& detector, const std::vector<std::string>& categories,
                         std::uint64_t init_seed);

// Pads [B, C, H, W] images with zeros to a multiple of `multiple`.
torch::Tensor pad_to_multiple(const torch::Tensor& images, int multiple);

// Pixel coordinates of the locations of a level: [H*W, 2] as (x, y), the
// centre of each stride cell.
torch::Tensor level_locations(std::int64_t height, std::int64_t width, int stride,
                              torch::ScalarType dtype = torch::kFloat32);

// Digest over every parameter and buffer value, for determinism checks.
std::string parameter_digest(const Detector& detector);
std::string part_digest(const Detector& detector, Part part);

}  // namespace diredi
