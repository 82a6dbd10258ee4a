#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <set>

#include "diredi/inference.hpp"
#include "test_util.hpp"

namespace diredi {
namespace {

double ref_iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min<double>(a.x2, b.x2) - std::max<double>(a.x1, b.x1));
  const double iy = std::max(0.0, std::min<double>(a.y2, b.y2) - std::max<double>(a.y1, b.y1));
  const double ua = (double(a.x2) - a.x1) * (double(a.y2) - a.y1) + (double(b.x2) - b.x1) * (double(b.y2) - b.y1);
  return ix * iy / (ua - ix * iy);
}

// Recursive definition: a box survives iff no surviving box of higher score
// overlaps it at or above the threshold.
std::set<std::size_t> brute_force_nms(const std::vector<Box>& boxes, const std::vector<float>& scores, double thr) {
  std::vector<int> memo(boxes.size(), -1);
  std::function<bool(std::size_t)> survives = [&](std::size_t i) -> bool {
    if (memo[i] >= 0) return memo[i] == 1;
    bool alive = true;
    for (std::size_t j = 0; j < boxes.size() && alive; ++j) {
      if (scores[j] > scores[i] && ref_iou(boxes[i], boxes[j]) >= thr && survives(j)) alive = false;
    }
    memo[i] = alive ? 1 : 0;
    return alive;
  };
  std::set<std::size_t> out;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    if (survives(i)) out.insert(i);
  }
  return out;
}

std::vector<Box> random_boxes(std::mt19937& rng, int n) {
  std::uniform_real_distribution<float> pos(0.f, 50.f), size(2.f, 20.f);
  std::vector<Box> out;
  for (int i = 0; i < n; ++i) {
    const float x = pos(rng), y = pos(rng);
    out.push_back({x, y, x + size(rng), y + size(rng)});
  }
  return out;
}

TEST(Nms, MatchesBruteForce) {
  std::mt19937 rng(17);
  std::uniform_int_distribution<int> count(0, 40);
  std::uniform_real_distribution<double> thr(0.1, 0.9);
  for (int trial = 0; trial < 200; ++trial) {
    const auto boxes = random_boxes(rng, count(rng));
    // Distinct scores: the recursive definition needs a strict order.
    std::vector<float> scores(boxes.size());
    std::iota(scores.begin(), scores.end(), 1.f);
    std::shuffle(scores.begin(), scores.end(), rng);
    const double t = thr(rng);
    const auto keep = nms(boxes, scores, t);
    const std::set<std::size_t> got(keep.begin(), keep.end());
    ASSERT_EQ(got, brute_force_nms(boxes, scores, t)) << "trial " << trial;
    for (std::size_t k = 1; k < keep.size(); ++k) EXPECT_GT(scores[keep[k - 1]], scores[keep[k]]);
  }
}

TEST(Nms, ThresholdIsInclusive) {
  // IoU exactly 0.5: [0,2]x[0,1] vs [0,1]x[0,1]... use halves of a 2x1 box.
  const std::vector<Box> boxes{{0.f, 0.f, 2.f, 1.f}, {0.f, 0.f, 1.f, 1.f}};
  ASSERT_DOUBLE_EQ(iou(boxes[0], boxes[1]), 0.5);
  EXPECT_EQ(nms(boxes, {0.9f, 0.8f}, 0.5).size(), 1u);
  EXPECT_EQ(nms(boxes, {0.9f, 0.8f}, 0.51).size(), 2u);
}

TEST(Nms, EqualScoresKeepInputOrder) {
  const std::vector<Box> boxes{{0.f, 0.f, 10.f, 10.f}, {0.f, 0.f, 10.f, 10.f}};
  const auto keep = nms(boxes, {0.5f, 0.5f}, 0.5);
  ASSERT_EQ(keep.size(), 1u);
  EXPECT_EQ(keep[0], 0u);
}

TEST(Nms, BatchedNeverSuppressesAcrossLabels) {
  std::mt19937 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto boxes = random_boxes(rng, 30);
    std::vector<float> scores(boxes.size());
    std::iota(scores.begin(), scores.end(), 1.f);
    std::shuffle(scores.begin(), scores.end(), rng);
    std::vector<int> labels(boxes.size());
    for (auto& l : labels) l = static_cast<int>(rng() % 3);
    std::set<std::size_t> want;
    for (int label = 0; label < 3; ++label) {
      std::vector<Box> b;
      std::vector<float> s;
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < boxes.size(); ++i) {
        if (labels[i] != label) continue;
        b.push_back(boxes[i]);
        s.push_back(scores[i]);
        idx.push_back(i);
      }
      for (auto k : brute_force_nms(b, s, 0.5)) want.insert(idx[k]);
    }
    const auto keep = batched_nms(boxes, scores, labels, 0.5);
    EXPECT_EQ(std::set<std::size_t>(keep.begin(), keep.end()), want);
  }
}

TEST(Iou, KnownValues) {
  EXPECT_DOUBLE_EQ(iou({0, 0, 2, 2}, {1, 1, 3, 3}), 1.0 / 7.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 1, 1}, {2, 2, 3, 3}), 0.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 1, 1}, {0, 0, 1, 1}), 1.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 0, 0}, {0, 0, 0, 0}), 0.0);
}

TEST(Decode, SingleConfidentLocation) {
  // One level, stride 8, 2x2 map, one class. Location (1, 0) has centre
  // (4, 12); distances 1,1,2,2 strides -> box (-4, 4, 20, 28) clipped.
  HeadOutputs out;
  auto logits = torch::full({1, 1, 2, 2}, -10.f);
  logits[0][0][1][0] = 3.f;
  out.class_logits = {logits};
  out.centerness_logits = {torch::zeros({1, 1, 2, 2})};
  auto reg = torch::zeros({1, 4, 2, 2});
  reg[0][0][1][0] = 1.f;
  reg[0][1][1][0] = 1.f;
  reg[0][2][1][0] = 2.f;
  reg[0][3][1][0] = 2.f;
  out.box_regression = {reg};
  InferenceConfig cfg;
  const auto det = decode_detections(out, {8}, 0, 16.f, 16.f, cfg);
  ASSERT_EQ(det.size(), 1u);
  EXPECT_EQ(det.labels[0], 0);
  EXPECT_EQ(det.boxes[0], (Box{0.f, 4.f, 16.f, 16.f}));
  const double p = 1.0 / (1.0 + std::exp(-3.0));
  EXPECT_NEAR(det.scores[0], std::sqrt(p * 0.5), 1e-6);
}

TEST(Decode, RespectsMaxDetections) {
  HeadOutputs out;
  out.class_logits = {torch::full({1, 2, 4, 4}, 5.f)};
  out.centerness_logits = {torch::full({1, 1, 4, 4}, 5.f)};
  out.box_regression = {torch::full({1, 4, 4, 4}, 0.4f)};
  InferenceConfig cfg;
  cfg.max_detections = 7;
  const auto det = decode_detections(out, {8}, 0, 32.f, 32.f, cfg);
  EXPECT_EQ(det.size(), 7u);
}

TEST(Infer, RestoresTrainingMode) {
  auto model = build_detector(testing::tiny_config({"a", "b"}), 1);
  model->train();
  auto dets = infer(model, torch::randn({2, 3, 64, 64}));
  EXPECT_EQ(dets.size(), 2u);
  EXPECT_TRUE(model->is_training());
}

}  // namespace
}  // namespace diredi
