#pragma once

#include <torch/torch.h>

#include <utility>
#include <vector>

#include "diredi/annotation.hpp"

namespace diredi {

inline constexpr std::int64_t kBackground = -1;

// Per-level training targets for a batch.
struct LevelTargets {
  torch::Tensor labels;      // [B, H, W] int64, class index or kBackground
  torch::Tensor regression;  // [B, 4, H, W] l/t/r/b in stride units (0 on background)
  torch::Tensor centerness;  // [B, H, W] in [0, 1] (0 on background)
};

struct TargetMaps {
  std::vector<LevelTargets> levels;

  std::int64_t num_positive() const;
};

// Per-pixel anchor-free assignment. A location is positive for a box iff it
// lies strictly inside the box and the largest of its four distances falls in
// (scale_bounds[l], scale_bounds[l+1]]. Ambiguous locations take the
// smallest-area box. Labels in `annotations` must already be class indices.
TargetMaps assign_targets(const std::vector<Annotation>& annotations,
                          const std::vector<std::pair<std::int64_t, std::int64_t>>& level_shapes,
                          const std::vector<int>& strides, const std::vector<float>& scale_bounds);

}  // namespace diredi
