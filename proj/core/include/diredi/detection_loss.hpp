#pragma once

#include <torch/torch.h>

#include "diredi/detector.hpp"
#include "diredi/targets.hpp"

namespace diredi {

struct DetectionLossConfig {
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
};

struct DetectionLoss {
  torch::Tensor classification;  // sigmoid focal loss, summed, / max(num_pos, 1)
  torch::Tensor box;             // mean GIoU loss over positives
  torch::Tensor centerness;      // mean BCE over positives
  std::int64_t num_positive = 0;

  torch::Tensor total() const { return classification + box + centerness; }
};

// Throws NumericError when any term is not finite.
DetectionLoss detection_loss(const HeadOutputs& outputs, const TargetMaps& targets,
                             const DetectionLossConfig& config = {});

// 1 - GIoU for boxes given as l/t/r/b distances from a shared point. [N, 4].
torch::Tensor giou_loss(const torch::Tensor& pred, const torch::Tensor& target);

}  // namespace diredi
