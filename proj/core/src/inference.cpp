#include "diredi/inference.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace diredi {

double iou(const Box& a, const Box& b) {
  const double iw = std::max(0.0, static_cast<double>(std::min(a.x2, b.x2)) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, static_cast<double>(std::min(a.y2, b.y2)) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = static_cast<double>(a.area()) + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

Box clip_box(const Box& b, float width, float height) {
  return {std::clamp(b.x1, 0.f, width), std::clamp(b.y1, 0.f, height), std::clamp(b.x2, 0.f, width),
          std::clamp(b.y2, 0.f, height)};
}

std::vector<std::size_t> nms(const std::vector<Box>& boxes, const std::vector<float>& scores, double iou_threshold) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> keep;
  std::vector<bool> dead(boxes.size(), false);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const auto i = order[oi];
    if (dead[i]) continue;
    keep.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const auto j = order[oj];
      if (!dead[j] && iou(boxes[i], boxes[j]) >= iou_threshold) dead[j] = true;
    }
  }
  return keep;
}

std::vector<std::size_t> batched_nms(const std::vector<Box>& boxes, const std::vector<float>& scores,
                                     const std::vector<int>& labels, double iou_threshold) {
  std::map<int, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < boxes.size(); ++i) by_label[labels[i]].push_back(i);
  std::vector<std::size_t> keep;
  for (const auto& [label, idx] : by_label) {
    std::vector<Box> b;
    std::vector<float> s;
    for (auto i : idx) {
      b.push_back(boxes[i]);
      s.push_back(scores[i]);
    }
    for (auto k : nms(b, s, iou_threshold)) keep.push_back(idx[k]);
  }
  std::stable_sort(keep.begin(), keep.end(), [&](auto a, auto b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  return keep;
}

Detections decode_detections(const HeadOutputs& outputs, const std::vector<int>& strides, std::int64_t b,
                             float image_width, float image_height, const InferenceConfig& config) {
  std::vector<Box> boxes;
  std::vector<float> scores;
  std::vector<int> labels;
  for (std::size_t l = 0; l < strides.size(); ++l) {
    auto logits = outputs.class_logits[l][b].detach().to(torch::kFloat32);  // [K, H, W]
    const auto k = logits.size(0), h = logits.size(1), w = logits.size(2);
    auto prob = torch::sigmoid(logits).reshape({k, h * w});
    auto ctr = torch::sigmoid(outputs.centerness_logits[l][b].detach().to(torch::kFloat32)).reshape({1, h * w});
    auto score = torch::sqrt(prob * ctr);  // [K, HW]
    auto reg = outputs.box_regression[l][b].detach().to(torch::kFloat32).reshape({4, h * w}) * strides[l];
    auto locs = level_locations(h, w, strides[l]);

    auto flat = score.reshape({-1});
    auto cand = (flat > config.score_threshold).nonzero().squeeze(1);
    if (cand.numel() == 0) continue;
    auto cand_scores = flat.index({cand});
    if (cand.numel() > config.pre_nms_top_k) {
      auto top = cand_scores.topk(config.pre_nms_top_k);
      cand = cand.index({std::get<1>(top)});
      cand_scores = std::get<0>(top);
    }
    auto cls = torch::div(cand, h * w, "floor").contiguous();
    auto loc = (cand % (h * w)).contiguous();
    auto cls_a = cls.accessor<std::int64_t, 1>();
    auto loc_a = loc.accessor<std::int64_t, 1>();
    auto sc_a = cand_scores.accessor<float, 1>();
    auto reg_a = reg.accessor<float, 2>();
    auto locs_a = locs.accessor<float, 2>();
    for (std::int64_t i = 0; i < cand.numel(); ++i) {
      const auto p = loc_a[i];
      const float x = locs_a[p][0], y = locs_a[p][1];
      Box bx{x - reg_a[0][p], y - reg_a[1][p], x + reg_a[2][p], y + reg_a[3][p]};
      bx = clip_box(bx, image_width, image_height);
      if (!bx.valid()) continue;
      boxes.push_back(bx);
      scores.push_back(sc_a[i]);
      labels.push_back(static_cast<int>(cls_a[i]));
    }
  }
  Detections out;
  auto keep = batched_nms(boxes, scores, labels, config.nms_iou);
  if (keep.size() > static_cast<std::size_t>(config.max_detections)) keep.resize(config.max_detections);
  for (auto i : keep) {
    out.boxes.push_back(boxes[i]);
    out.scores.push_back(scores[i]);
    out.labels.push_back(labels[i]);
  }
  return out;
}

std::vector<Detections> infer(Detector& detector, const torch::Tensor& images, const InferenceConfig& config) {
  torch::NoGradGuard guard;
  const bool was_training = detector->is_training();
  detector->eval();
  auto result = detector->forward(images);
  if (was_training) detector->train();
  std::vector<Detections> out;
  const auto w = static_cast<float>(images.size(3));
  const auto h = static_cast<float>(images.size(2));
  for (std::int64_t b = 0; b < images.size(0); ++b) {
    out.push_back(decode_detections(result.head, detector->config().strides, b, w, h, config));
  }
  return out;
}

}  // namespace diredi
