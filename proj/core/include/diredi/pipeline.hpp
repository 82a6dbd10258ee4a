#pragma once

#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "diredi/dataset.hpp"
#include "diredi/detector.hpp"
#include "diredi/evaluation.hpp"
#include "diredi/fgd.hpp"
#include "diredi/train.hpp"
#include "diredi/verify.hpp"

namespace diredi {

inline constexpr int kPlanFormatVersion = 1;

// Stage order of a full run. Data preparation runs before the first stage
// and the comparison report after the last.
const std::vector<std::string>& stage_names();

struct DataSourceConfig {
  std::string source = "toy";  // toy | voc
  // toy: one generator spec; the three pools differ only in seed and size.
  ToySpec toy;
  int manufacturer_images = 800;
  int customer_images = 600;
  int eval_images = 300;
  // voc
  std::filesystem::path voc_root;
  std::vector<std::string> train_years{"2007", "2012"};
  std::string train_split = "trainval";
  std::vector<std::string> eval_years{"2007"};
  std::string eval_split = "test";
  double customer_fraction = 0.5;  // share of the VOC train pool held by the customer
  int image_size = 0;
  FilterPolicy filter;

  nlohmann::json to_json() const;
  static DataSourceConfig from_json(const nlohmann::json& j);
};

struct StageConfigs {
  TrainConfig train_large;
  TrainConfig distill_a;
  FGDConfig fgd_a;
  TrainConfig distill_b;
  FGDConfig fgd_b;
  TrainConfig rd_emulation;
  FGDConfig fgd_rd_emulation;
  RDConfig rd_emulation_weights{1.0, 0.0};
  TrainConfig rd_customer;
  FGDConfig fgd_rd_customer;
  RDConfig rd_customer_weights{1.0, 1.0};
  std::vector<std::string> delta_parts{"neck", "head"};
  double gamma_delta = 1.0;
  double delta_update = 1.0;
  VerificationThresholds thresholds;
  TrainConfig distill_c;
  FGDConfig fgd_c;
  EvalConfig eval;
  TrainConfig baseline_direct;
};

struct ExperimentPlan {
  std::string plan_id = "toy-exp1";
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;  // empty: <output root>/<plan_id>
  DataSourceConfig data;
  CategoryPlan categories;
  std::map<std::string, DetectorConfig> models;  // "large", "tutor", "edge"
  StageConfigs stages;
  // Testing hook: the manufacturer applies norm-matched noise instead of the
  // received delta.
  bool inject_noise_delta = false;

  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentPlan from_json(const nlohmann::json& j);

  // Built-in presets: toy-exp1, toy-exp2 (desk scale) and voc-exp1, voc-exp2
  // (the reference hyper-parameters; need a VOC root).
  static ExperimentPlan preset(const std::string& name);
  static std::vector<std::string> preset_names();
};

ExperimentPlan load_plan(const std::filesystem::path& path);
void save_plan(const ExperimentPlan& plan, const std::filesystem::path& path);

struct ArtifactRef {
  std::string path;  // relative to the run directory
  std::string digest;
};

struct StageRecord {
  std::string name;
  std::string status = "pending";  // pending | complete | failed | skipped
  std::string config_digest;       // covers config, seed and input digests
  std::map<std::string, ArtifactRef> inputs;
  std::map<std::string, ArtifactRef> outputs;
  double wall_clock_seconds = 0.0;
  nlohmann::json eval_snapshots = nlohmann::json::array();
  std::string message;
  bool reused = false;  // skipped on resume because nothing changed
};

struct RunManifest {
  std::string plan_id;
  std::filesystem::path run_dir;
  std::vector<StageRecord> stages;  // in execution order, including prepare_data and report
  std::string status = "running";   // complete | gate_failed | failed

  StageRecord* find(const std::string& name);
  const StageRecord* find(const std::string& name) const;
  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

struct RunOptions {
  std::optional<std::filesystem::path> output_dir;  // overrides the plan
  bool resume = true;
  std::optional<std::uint64_t> seed;  // overrides the plan
  bool inject_noise_delta = false;    // ORed with the plan flag
};

// Output root: $DIREDI_OUT_ROOT, else ./runs.
std::filesystem::path default_output_root();
std::filesystem::path resolve_run_dir(const ExperimentPlan& plan, const RunOptions& options);

// Runs every stage, skipping completed ones whose digests still match.
// A failed verification gate marks the downstream stages skipped and sets
// status "gate_failed"; other errors propagate after the manifest is saved.
RunManifest run_plan(const ExperimentPlan& plan, const RunOptions& options = {});

// Re-hashes every recorded output; returns the paths that no longer match.
std::vector<std::string> verify_manifest(const RunManifest& manifest);

// Comparison rows, in report order, from the per-model reports of a run.
std::vector<ComparisonRow> load_comparison_rows(const std::filesystem::path& run_dir);

// Writes comparison.txt, comparison.json, ap.csv and ap_chart.png into `dir`.
void write_comparison(const std::vector<ComparisonRow>& rows, const std::vector<std::string>& categories,
                      const std::filesystem::path& dir);

// Grouped per-category AP bars, one colour per model.
void render_ap_chart(const std::vector<ComparisonRow>& rows, const std::vector<std::string>& categories,
                     const std::filesystem::path& png_path);

nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

// Comparison-table row keys and labels, in order.
struct ModelRow {
  std::string key;    // report file stem under reports/eval/
  std::string label;  // table label
};
const std::vector<ModelRow>& comparison_model_rows();

}  // namespace diredi
