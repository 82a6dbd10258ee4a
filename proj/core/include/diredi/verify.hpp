#pragma once

#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <string>
#include <vector>

#include "diredi/dataset.hpp"
#include "diredi/detector.hpp"
#include "diredi/evaluation.hpp"

namespace diredi {

struct VerificationThresholds {
  // Largest tolerated absolute AP drop of a retained category.
  double max_ap_drop = 0.10;
  std::map<std::string, double> per_category;  // overrides max_ap_drop
  // Regressions the manufacturer has agreed to (e.g. a category the customer
  // asked to forget). They are still flagged but do not fail the gate.
  std::set<std::string> accepted_regressions;

  double threshold(const std::string& category) const;
  void validate() const;
  nlohmann::json to_json() const;
  static VerificationThresholds from_json(const nlohmann::json& j);
};

struct CategoryCheck {
  std::string category;
  double ap_before = 0.0;
  double ap_after = 0.0;
  double threshold = 0.0;
  bool regressed = false;  // ap_before - ap_after > threshold
  bool accepted = false;   // regressed, but listed as an accepted regression
};

struct VerificationReport {
  std::vector<CategoryCheck> checks;  // in category name order
  bool passed = true;
  VerificationThresholds thresholds;
  double map_before = 0.0;
  double map_after = 0.0;
  std::string dataset_digest;

  std::vector<std::string> regressions() const;
  nlohmann::json to_json() const;
  static VerificationReport from_json(const nlohmann::json& j);
};

// Evaluates both tutors on the verification data over its labelled
// (manufacturer-retained) categories. The verdict fails iff a regressed
// category is not an accepted regression. Neither model is modified.
// Throws ConfigError on an empty dataset.
VerificationReport verify_update(Detector& original_tutor, Detector& updated_tutor,
                                 const DetectionDataset& verification_dataset,
                                 const VerificationThresholds& thresholds, const EvalConfig& eval = {});

}  // namespace diredi
