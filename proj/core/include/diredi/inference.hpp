#pragma once

#include <torch/torch.h>

#include <vector>

#include "diredi/annotation.hpp"
#include "diredi/detector.hpp"

namespace diredi {

// Detections for one image; sorted by descending score after infer().
struct Detections {
  std::vector<Box> boxes;
  std::vector<float> scores;
  std::vector<int> labels;

  std::size_t size() const { return boxes.size(); }
};

struct InferenceConfig {
  double score_threshold = 0.05;
  double nms_iou = 0.6;
  int max_detections = 100;
  int pre_nms_top_k = 1000;
};

// Greedy suppression: walks boxes by descending score and drops any later box
// whose IoU with a kept box is >= iou_threshold. Returns kept indices in
// score order.
std::vector<std::size_t> nms(const std::vector<Box>& boxes, const std::vector<float>& scores, double iou_threshold);

// nms() applied independently per label.
std::vector<std::size_t> batched_nms(const std::vector<Box>& boxes, const std::vector<float>& scores,
                                     const std::vector<int>& labels, double iou_threshold);

// Decodes one image (index `b` of the batch) of head outputs. Scores are
// sqrt(class probability * centerness); boxes are clipped to the image.
Detections decode_detections(const HeadOutputs& outputs, const std::vector<int>& strides, std::int64_t b,
                             float image_width, float image_height, const InferenceConfig& config);

// Runs the detector in eval mode on a [B, C, H, W] batch.
std::vector<Detections> infer(Detector& detector, const torch::Tensor& images, const InferenceConfig& config = {});

}  // namespace diredi
