#pragma once

#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "diredi/dataset.hpp"
#include "diredi/detection_loss.hpp"
#include "diredi/detector.hpp"
#include "diredi/evaluation.hpp"
#include "diredi/fgd.hpp"

namespace diredi {

enum class OptimizerKind { sgd_momentum, adaptive };
enum class LrSchedule { constant, step };

struct TrainConfig {
  double learning_rate = 1e-2;
  int max_epochs = 10;
  int batch_size = 16;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  LrSchedule lr_schedule = LrSchedule::constant;
  int step_every = 0;       // step schedule: multiply lr by step_factor every this many epochs
  double step_factor = 0.1;
  int warmup_steps = 0;     // linear ramp from lr/10
  double grad_clip_norm = 10.0;
  bool hflip = true;        // flip each batch with probability 1/2
  int image_size = 0;
  // Keeps the student backbone (weights and normalisation statistics) fixed.
  bool freeze_backbone = false;
  // Evaluation snapshot period in epochs; 0 = only before and after training.
  int eval_every = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& defaults);
  std::string digest() const;
};

// Weights of the reverse-distillation objective alpha * L_fea + beta * L_detect.
struct RDConfig {
  double alpha_rd = 1.0;
  double beta_rd = 1.0;

  void validate() const;
  nlohmann::json to_json() const;
  static RDConfig from_json(const nlohmann::json& j);
  static RDConfig from_json(const nlohmann::json& j, const RDConfig& defaults);
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  int steps = 0;
  double learning_rate = 0.0;
  // Weighted loss terms summed over the epoch's steps.
  std::map<std::string, double> components;
  // Sum of `components`, accumulated in name order.
  double total = 0.0;
};

struct EvalSnapshot {
  int epoch = 0;  // 0 = before training
  double map = 0.0;
  std::map<std::string, double> per_class_ap;
};

struct TrainRecord {
  std::string procedure;  // distill | reverse_distill | redistill | train_direct | train
  nlohmann::json config;
  std::string config_digest;
  std::string dataset_digest;
  std::vector<EpochRecord> epochs;
  std::vector<EvalSnapshot> eval_snapshots;
  std::vector<std::string> warnings;
  std::string initial_parameter_digest;
  std::string final_parameter_digest;
  double wall_clock_seconds = 0.0;

  nlohmann::json to_json() const;
  static TrainRecord from_json(const nlohmann::json& j);
};

// Optional evaluation during training.
struct SnapshotOptions {
  const DetectionDataset* dataset = nullptr;
  EvalConfig eval;
  std::vector<std::string> categories;
};

// Supervised training with the detection loss only (also used for the
// large model from scratch). Returns a trained copy.
std::pair<Detector, TrainRecord> train_direct(const Detector& model, const DetectionDataset& dataset,
                                              const TrainConfig& config, const SnapshotOptions& snapshots = {});

// Student trained on detection loss + feature distillation from the frozen
// teacher's pyramid. The dataset's categories must be covered by both
// models (ConfigError otherwise). The teacher is left bit-identical.
std::pair<Detector, TrainRecord> distill(const Detector& teacher, const Detector& student,
                                         const DetectionDataset& dataset, const FGDConfig& fgd,
                                         const TrainConfig& config, const SnapshotOptions& snapshots = {});

// A small frozen teacher trains a larger student on
//   alpha * L_fea(teacher -> student) + beta * L_detect(student).
// The student must have at least as many parameters as the teacher. With
// beta = 0 the head receives no gradient; categories the teacher lacks are
// reported as a warning. With beta > 0 the student must cover the dataset.
std::pair<Detector, TrainRecord> reverse_distill(const Detector& edge_teacher, const Detector& tutor_student,
                                                 const DetectionDataset& dataset, const FGDConfig& fgd,
                                                 const RDConfig& rd, const TrainConfig& config,
                                                 const SnapshotOptions& snapshots = {});

// Re-shapes the edge head to `categories` (retained rows copied, new rows
// fresh from `init_seed`) and distills from the updated tutor. Every
// category must be known to the tutor.
std::pair<Detector, TrainRecord> redistill_finetune(const Detector& updated_tutor, const Detector& edge_model,
                                                    const DetectionDataset& dataset,
                                                    const std::vector<std::string>& categories,
                                                    const FGDConfig& fgd, const TrainConfig& config,
                                                    std::uint64_t init_seed, const SnapshotOptions& snapshots = {});

}  // namespace diredi
