#include "diredi/verify.hpp"

#include <cmath>

#include "diredi/error.hpp"

namespace diredi {

double VerificationThresholds::threshold(const std::string& category) const {
  auto it = per_category.find(category);
  return it == per_category.end() ? max_ap_drop : it->second;
}

void VerificationThresholds::validate() const {
  if (!(max_ap_drop >= 0.0) || !std::isfinite(max_ap_drop)) throw ConfigError("verify: max_ap_drop must be >= 0");
  for (const auto& [name, t] : per_category) {
    if (!(t >= 0.0) || !std::isfinite(t)) throw ConfigError("verify: threshold of '" + name + "' must be >= 0");
  }
}

nlohmann::json VerificationThresholds::to_json() const {
  return {{"max_ap_drop", max_ap_drop},
          {"per_category", per_category},
          {"accepted_regressions", accepted_regressions}};
}

VerificationThresholds VerificationThresholds::from_json(const nlohmann::json& j) {
  VerificationThresholds t;
  try {
    t.max_ap_drop = j.value("max_ap_drop", t.max_ap_drop);
    t.per_category = j.value("per_category", t.per_category);
    t.accepted_regressions = j.value("accepted_regressions", t.accepted_regressions);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("verify thresholds: ") + e.what());
  }
  t.validate();
  return t;
}

std::vector<std::string> VerificationReport::regressions() const {
  std::vector<std::string> out;
  for (const auto& c : checks) {
    if (c.regressed) out.push_back(c.category);
  }
  return out;
}

nlohmann::json VerificationReport::to_json() const {
  nlohmann::json cs = nlohmann::json::array();
  for (const auto& c : checks) {
    cs.push_back({{"category", c.category},
                  {"ap_before", c.ap_before},
                  {"ap_after", c.ap_after},
                  {"threshold", c.threshold},
                  {"regressed", c.regressed},
                  {"accepted", c.accepted}});
  }
  return {{"verdict", passed ? "pass" : "fail"},
          {"checks", cs},
          {"thresholds", thresholds.to_json()},
          {"map_before", map_before},
          {"map_after", map_after},
          {"dataset_digest", dataset_digest}};
}

VerificationReport VerificationReport::from_json(const nlohmann::json& j) {
  VerificationReport r;
  try {
    r.passed = j.at("verdict").get<std::string>() == "pass";
    for (const auto& c : j.at("checks")) {
      r.checks.push_back({c.at("category").get<std::string>(), c.at("ap_before").get<double>(),
                          c.at("ap_after").get<double>(), c.at("threshold").get<double>(),
                          c.at("regressed").get<bool>(), c.at("accepted").get<bool>()});
    }
    r.thresholds = VerificationThresholds::from_json(j.at("thresholds"));
    r.map_before = j.at("map_before").get<double>();
    r.map_after = j.at("map_after").get<double>();
    r.dataset_digest = j.value("dataset_digest", "");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("verification report: ") + e.what());
  }
  return r;
}

VerificationReport verify_update(Detector& original_tutor, Detector& updated_tutor,
                                 const DetectionDataset& verification_dataset,
                                 const VerificationThresholds& thresholds, const EvalConfig& eval) {
  thresholds.validate();
  if (verification_dataset.empty()) throw ConfigError("verify_update: empty verification dataset");
  const auto retained_set = verification_dataset.labelled_categories();
  const std::vector<std::string> retained(retained_set.begin(), retained_set.end());
  const EvalReport before = evaluate(original_tutor, verification_dataset, eval, retained);
  const EvalReport after = evaluate(updated_tutor, verification_dataset, eval, retained);

  VerificationReport report;
  report.thresholds = thresholds;
  report.map_before = before.map;
  report.map_after = after.map;
  report.dataset_digest = before.dataset_digest;
  for (const auto& c : retained) {
    CategoryCheck check;
    check.category = c;
    check.ap_before = before.ap(c);
    check.ap_after = after.ap(c);
    check.threshold = thresholds.threshold(c);
    check.regressed = check.ap_before - check.ap_after > check.threshold;
    check.accepted = check.regressed && thresholds.accepted_regressions.contains(c);
    if (check.regressed && !check.accepted) report.passed = false;
    report.checks.push_back(check);
  }
  return report;
}

}  // namespace diredi
