#pragma once

#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "diredi/annotation.hpp"
#include "diredi/dataset.hpp"
#include "diredi/detector.hpp"
#include "diredi/inference.hpp"

namespace diredi {

enum class Interpolation { all_point, eleven_point };

std::string to_string(Interpolation interpolation);
Interpolation interpolation_from_string(const std::string& name);

struct EvalConfig {
  double iou_threshold = 0.5;
  // Operating point of the precision/recall/F1 columns.
  double score_threshold = 0.3;
  Interpolation interpolation = Interpolation::all_point;
  InferenceConfig inference;
  int batch_size = 16;
  int image_size = 0;  // resize before inference; 0 keeps native resolution

  void validate() const;
  nlohmann::json to_json() const;
  static EvalConfig from_json(const nlohmann::json& j);
  std::string digest() const;
};

enum class MatchFlag { tp, fp, ignored };

// Detections of one image with category names instead of class indices.
struct NamedDetections {
  std::vector<Box> boxes;
  std::vector<float> scores;
  std::vector<std::string> categories;

  std::size_t size() const { return boxes.size(); }
};

// Ground truth of one image with category names.
struct NamedGroundTruth {
  std::vector<Box> boxes;
  std::vector<std::string> categories;
  std::vector<bool> difficult;
};

// Greedy matching of one image. Detections are visited in the given order
// (expected: descending score); each takes the highest-IoU not-yet-matched
// ground truth of its category. IoU >= threshold gives TP, or `ignored`
// when that ground truth is difficult; otherwise FP.
std::vector<MatchFlag> match_detections(const NamedDetections& detections, const NamedGroundTruth& ground_truth,
                                        double iou_threshold);

// Area under the precision/recall curve for TP flags ranked by descending
// score. Undefined (nullopt) when num_gt = 0 and there are no detections;
// 0 when num_gt = 0 and there are detections.
std::optional<double> average_precision(const std::vector<bool>& tp_flags, std::size_t num_gt,
                                        Interpolation interpolation = Interpolation::all_point);

// 2PR / (P + R), and 0 when P + R = 0.
double f1(double precision, double recall);

struct ClassResult {
  std::optional<double> ap;  // nullopt: excluded from mAP
  std::size_t num_gt = 0;
  std::size_t num_detections = 0;
};

struct EvalReport {
  std::map<std::string, ClassResult> classes;
  double map = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t true_positives = 0;   // at score_threshold
  std::size_t false_positives = 0;  // at score_threshold
  std::size_t num_gt = 0;
  std::size_t num_images = 0;
  nlohmann::json config;
  std::string config_digest;
  std::string dataset_digest;

  // AP of `category`, 0 when it was not evaluated or excluded.
  double ap(const std::string& category) const;
  // Mean AP over the given categories that have a defined AP.
  double mean_ap(const std::vector<std::string>& categories) const;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

// Pure scoring step of evaluate(). Categories outside `categories` are
// ignored on both sides.
EvalReport evaluate_detections(const std::vector<NamedDetections>& detections,
                               const std::vector<NamedGroundTruth>& ground_truth,
                               const std::vector<std::string>& categories, const EvalConfig& config);

// Runs the model over the dataset (eval mode, batched) and returns named
// detections per item.
std::vector<NamedDetections> collect_detections(Detector& model, const DetectionDataset& dataset,
                                                const EvalConfig& config);

NamedGroundTruth named_ground_truth(const DetectionDataset& dataset, std::size_t index, int image_size = 0);

// Evaluates over `categories`; when empty, over the categories labelled in
// the dataset plus the model's own categories. Throws ConfigError on an
// empty dataset.
EvalReport evaluate(Detector& model, const DetectionDataset& dataset, const EvalConfig& config,
                    const std::vector<std::string>& categories = {});

// One row of the model comparison table.
struct ComparisonRow {
  std::string label;
  EvalReport report;
};

// Text table: model, mAP, precision, recall, F1 (percent), then the AP of
// each listed category.
std::string render_comparison_table(const std::vector<ComparisonRow>& rows,
                                    const std::vector<std::string>& categories);
// CSV with one line per (model, category) AP.
std::string render_ap_csv(const std::vector<ComparisonRow>& rows, const std::vector<std::string>& categories);

}  // namespace diredi
