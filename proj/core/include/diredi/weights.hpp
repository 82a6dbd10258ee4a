#pragma once

#include <torch/torch.h>

#include <set>
#include <string>
#include <vector>

#include "diredi/detector.hpp"

namespace diredi {

// Bias of a head row for a class the model must never report. Weights of
// such a row are zero, so its score is sigmoid(-10) ~ 4.5e-5 everywhere.
inline constexpr double kAbsentClassBias = -10.0;

struct WeightEntry {
  std::string name;
  torch::Tensor value;  // float64, contiguous, owned
};

// Named neck/head tensors in lexicographic name order. Values are held in
// float64 so that delta arithmetic on float32 weights round-trips exactly.
class WeightSet {
 public:
  WeightSet() = default;

  // Keeps name order; throws ConfigError on a duplicate or a backbone name.
  void insert(std::string name, const torch::Tensor& value);

  const std::vector<WeightEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const WeightEntry* find(const std::string& name) const;
  std::vector<std::string> names() const;
  // Sum of squares over every entry, then sqrt.
  double norm() const;

 private:
  std::vector<WeightEntry> entries_;
};

bool operator==(const WeightSet& a, const WeightSet& b);

// Copies the parameters under the requested namespaces. Requesting the
// backbone throws ConfigError.
WeightSet extract_weights(const Detector& model, const std::set<Part>& parts = {Part::neck, Part::head});
// Same, with part names ("neck", "head"); unknown names throw ConfigError.
WeightSet extract_weights(const Detector& model, const std::vector<std::string>& part_names);

// gamma * w_t2 - w_t1 per entry. Mismatched names or shapes throw ShapeError
// listing every offending entry.
WeightSet compute_delta(const WeightSet& w_t1, const WeightSet& w_t2, double gamma_delta);

// Digest over the names and shapes of a weight set (values excluded).
std::string architecture_digest(const WeightSet& weights);
// Digest over the neck and head parameter names and shapes of a model.
std::string architecture_digest(const Detector& model);

// Copy of `model` whose neck+head parameters become W + delta_update * delta,
// computed in float64 and stored back in the parameter dtype. The backbone
// and normalisation buffers are copied untouched. Throws
// DigestMismatchError when the delta does not fit the model.
Detector apply_delta(const Detector& model, const WeightSet& delta, double delta_update);

// Copy of `model` whose head covers `categories` in that order. Rows of
// retained categories are copied; missing categories get absent-class rows
// (zero weights, kAbsentClassBias).
Detector align_to_categories(const Detector& model, const std::vector<std::string>& categories);

// Same head rows, new category names.
Detector rename_categories(const Detector& model, const std::vector<std::string>& names);

}  // namespace diredi
