#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "diredi/detection_loss.hpp"
#include "diredi/error.hpp"
#include "diredi/targets.hpp"
#include "test_util.hpp"

namespace diredi {
namespace {

constexpr float kInf = std::numeric_limits<float>::infinity();

Annotation make_annotation(std::vector<Box> boxes, std::vector<int> labels) {
  Annotation a;
  a.boxes = std::move(boxes);
  a.labels = std::move(labels);
  return a;
}

// Brute-force assignment of one location, written from the rule: strictly
// inside, max distance within the level's range, smallest area wins.
struct Assigned {
  int label = -1;
  float l = 0, t = 0, r = 0, b = 0;
};

Assigned brute_force(const Annotation& a, float x, float y, float lo, float hi) {
  Assigned best;
  float best_area = kInf;
  for (std::size_t k = 0; k < a.boxes.size(); ++k) {
    const auto& bx = a.boxes[k];
    const float l = x - bx.x1, t = y - bx.y1, r = bx.x2 - x, b = bx.y2 - y;
    if (l <= 0 || t <= 0 || r <= 0 || b <= 0) continue;
    const float m = std::max(std::max(l, r), std::max(t, b));
    if (m <= lo || m > hi) continue;
    const float area = (bx.x2 - bx.x1) * (bx.y2 - bx.y1);
    if (area < best_area) {
      best_area = area;
      best = {a.labels[k], l, t, r, b};
    }
  }
  return best;
}

TEST(Targets, NestedBoxesOnFourByFour) {
  // Locations sit at 4, 12, 20, 28. The inner box strictly contains the
  // centre 2x2 block and wins there by area.
  const auto ann = make_annotation({{0.f, 0.f, 32.f, 32.f}, {8.f, 8.f, 24.f, 24.f}}, {0, 1});
  const auto maps = assign_targets({ann}, {{4, 4}}, {8}, {0.f, kInf});
  const auto& lv = maps.levels[0];
  const std::int64_t expect[4][4] = {{0, 0, 0, 0}, {0, 1, 1, 0}, {0, 1, 1, 0}, {0, 0, 0, 0}};
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) EXPECT_EQ(lv.labels[0][i][j].item<std::int64_t>(), expect[i][j]) << i << "," << j;
  }
  // Inner box at location (12, 12): l=4 t=4 r=12 b=12 in stride units.
  EXPECT_FLOAT_EQ(lv.regression[0][0][1][1].item<float>(), 0.5f);
  EXPECT_FLOAT_EQ(lv.regression[0][1][1][1].item<float>(), 0.5f);
  EXPECT_FLOAT_EQ(lv.regression[0][2][1][1].item<float>(), 1.5f);
  EXPECT_FLOAT_EQ(lv.regression[0][3][1][1].item<float>(), 1.5f);
  EXPECT_NEAR(lv.centerness[0][1][1].item<float>(), 1.f / 3.f, 1e-6);
  // Outer box at the corner (4, 4): l=t=4, r=b=28.
  EXPECT_NEAR(lv.centerness[0][0][0].item<float>(), 4.f / 28.f, 1e-6);
  EXPECT_EQ(maps.num_positive(), 16);
}

TEST(Targets, ScaleBoundsRouteToOneLevel) {
  // Only locations 12 and 20 fall strictly inside; their max distance is 12,
  // so level 0, which owns (0, 16], takes every positive.
  const auto small = make_annotation({{8.f, 8.f, 24.f, 24.f}}, {0});
  const auto maps = assign_targets({small}, {{4, 4}, {2, 2}}, {8, 16}, {0.f, 16.f, kInf});
  EXPECT_GT((maps.levels[0].labels == 0).sum().item<int>(), 0);
  EXPECT_EQ((maps.levels[1].labels == 0).sum().item<int>(), 0);
}

TEST(Targets, RandomMatchesBruteForce) {
  std::mt19937 rng(5);
  std::uniform_real_distribution<float> u(0.f, 64.f);
  const std::vector<int> strides{8, 16, 32};
  const std::vector<float> bounds{0.f, 16.f, 32.f, kInf};
  for (int trial = 0; trial < 30; ++trial) {
    Annotation a;
    for (int k = 0; k < 4; ++k) {
      float x1 = u(rng), x2 = u(rng), y1 = u(rng), y2 = u(rng);
      if (x1 > x2) std::swap(x1, x2);
      if (y1 > y2) std::swap(y1, y2);
      a.boxes.push_back({x1, y1, x2 + 1.f, y2 + 1.f});
      a.labels.push_back(k);
    }
    const auto maps = assign_targets({a}, {{8, 8}, {4, 4}, {2, 2}}, strides, bounds);
    for (std::size_t l = 0; l < strides.size(); ++l) {
      const auto& lv = maps.levels[l];
      const float s = static_cast<float>(strides[l]);
      for (std::int64_t i = 0; i < lv.labels.size(1); ++i) {
        for (std::int64_t j = 0; j < lv.labels.size(2); ++j) {
          const auto want = brute_force(a, static_cast<float>(j) * s + s / 2, static_cast<float>(i) * s + s / 2,
                                        bounds[l], bounds[l + 1]);
          ASSERT_EQ(lv.labels[0][i][j].item<std::int64_t>(), want.label) << "trial " << trial;
          if (want.label >= 0) {
            EXPECT_FLOAT_EQ(lv.regression[0][0][i][j].item<float>(), want.l / s);
            EXPECT_FLOAT_EQ(lv.regression[0][3][i][j].item<float>(), want.b / s);
          }
        }
      }
    }
  }
}

TEST(Targets, EmptyAnnotationIsAllBackground) {
  const auto maps = assign_targets({Annotation{}}, {{4, 4}}, {8}, {0.f, kInf});
  EXPECT_EQ(maps.num_positive(), 0);
  EXPECT_THROW(assign_targets({Annotation{}}, {{4, 4}}, {8}, {0.f}), ShapeError);
}

TEST(DetectionLossTest, GiouKnownValues) {
  auto same = torch::tensor({{1.f, 2.f, 3.f, 4.f}});
  EXPECT_NEAR(giou_loss(same, same).item<float>(), 0.f, 1e-6);
  // Concentric squares of side 2 and 4: IoU 1/4, enclosure equals the union.
  auto pred = torch::tensor({{1.f, 1.f, 1.f, 1.f}});
  auto target = torch::tensor({{2.f, 2.f, 2.f, 2.f}});
  EXPECT_NEAR(giou_loss(pred, target).item<float>(), 0.75f, 1e-6);
}

TEST(DetectionLossTest, TwoByTwoScalarOracle) {
  // One level, 2x2 map, two classes. Location (0, 0) is positive for class 1.
  HeadOutputs out;
  out.class_logits = {torch::tensor({0.5f, -1.f, 2.f, 0.f, 1.f, -2.f, 0.3f, -0.7f}).reshape({1, 2, 2, 2})};
  out.centerness_logits = {torch::tensor({0.2f, 0.f, 0.f, 0.f}).reshape({1, 1, 2, 2})};
  out.box_regression = {torch::tensor({1.f, 0.f, 0.f, 0.f, 1.f, 0.f, 0.f, 0.f, 2.f, 0.f, 0.f, 0.f, 2.f, 0.f, 0.f, 0.f})
                            .reshape({1, 4, 2, 2})};
  TargetMaps targets;
  LevelTargets lt;
  lt.labels = torch::full({1, 2, 2}, kBackground, torch::kInt64);
  lt.labels[0][0][0] = 1;
  lt.regression = torch::zeros({1, 4, 2, 2});
  for (int c = 0; c < 4; ++c) lt.regression[0][c][0][0] = 2.f;
  lt.centerness = torch::zeros({1, 2, 2});
  lt.centerness[0][0][0] = 0.6f;
  targets.levels.push_back(lt);

  const auto loss = detection_loss(out, targets);

  // Focal loss by hand: logits x[k][i][j]; positive only at k=1, (0,0).
  const double alpha = 0.25, gamma = 2.0;
  const double logits[2][4] = {{0.5, -1.0, 2.0, 0.0}, {1.0, -2.0, 0.3, -0.7}};
  double focal = 0;
  for (int k = 0; k < 2; ++k) {
    for (int p = 0; p < 4; ++p) {
      const double prob = 1.0 / (1.0 + std::exp(-logits[k][p]));
      const bool positive = k == 1 && p == 0;
      focal += positive ? -alpha * std::pow(1 - prob, gamma) * std::log(prob)
                        : -(1 - alpha) * std::pow(prob, gamma) * std::log(1 - prob);
    }
  }
  EXPECT_NEAR(loss.classification.item<double>(), focal / 1.0, 1e-6);
  // Predicted l,t,r,b = 1,1,2,2 against 2,2,2,2: IoU = GIoU = 9/16.
  EXPECT_NEAR(loss.box.item<double>(), 7.0 / 16.0, 1e-6);
  const double pc = 1.0 / (1.0 + std::exp(-0.2));
  EXPECT_NEAR(loss.centerness.item<double>(), -(0.6 * std::log(pc) + 0.4 * std::log(1 - pc)), 1e-6);
  EXPECT_EQ(loss.num_positive, 1);
}

TEST(DetectionLossTest, NoPositivesKeepsGraphAndZeroBoxTerms) {
  HeadOutputs out;
  out.class_logits = {torch::zeros({1, 3, 2, 2}, torch::requires_grad())};
  out.centerness_logits = {torch::zeros({1, 1, 2, 2}, torch::requires_grad())};
  out.box_regression = {torch::ones({1, 4, 2, 2}, torch::requires_grad())};
  const auto targets = assign_targets({Annotation{}}, {{2, 2}}, {8}, {0.f, kInf});
  const auto loss = detection_loss(out, targets);
  EXPECT_EQ(loss.box.item<double>(), 0.0);
  EXPECT_EQ(loss.centerness.item<double>(), 0.0);
  EXPECT_GT(loss.classification.item<double>(), 0.0);
  loss.total().backward();
  EXPECT_TRUE(out.box_regression[0].grad().defined());
}

TEST(DetectionLossTest, NonFiniteIsNumericError) {
  HeadOutputs out;
  out.class_logits = {torch::full({1, 1, 1, 1}, std::nanf(""))};
  out.centerness_logits = {torch::zeros({1, 1, 1, 1})};
  out.box_regression = {torch::ones({1, 4, 1, 1})};
  const auto targets = assign_targets({Annotation{}}, {{1, 1}}, {8}, {0.f, kInf});
  EXPECT_THROW(detection_loss(out, targets), NumericError);
}

}  // namespace
}  // namespace diredi
