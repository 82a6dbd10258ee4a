#include "diredi/weights.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "diredi/error.hpp"
#include "diredi/hash.hpp"

namespace diredi {

void WeightSet::insert(std::string name, const torch::Tensor& value) {
  if (part_of(name) == Part::backbone) throw ConfigError("weight set: backbone tensor '" + name + "' refused");
  auto it = std::lower_bound(entries_.begin(), entries_.end(), name,
                             [](const WeightEntry& e, const std::string& n) { return e.name < n; });
  if (it != entries_.end() && it->name == name) throw ConfigError("weight set: duplicate entry '" + name + "'");
  entries_.insert(it, {std::move(name), value.detach().to(torch::kFloat64).contiguous().clone()});
}

const WeightEntry* WeightSet::find(const std::string& name) const {
  auto it = std::lower_bound(entries_.begin(), entries_.end(), name,
                             [](const WeightEntry& e, const std::string& n) { return e.name < n; });
  return it != entries_.end() && it->name == name ? &*it : nullptr;
}

std::vector<std::string> WeightSet::names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

double WeightSet::norm() const {
  double sq = 0.0;
  for (const auto& e : entries_) sq += e.value.pow(2).sum().item<double>();
  return std::sqrt(sq);
}

bool operator==(const WeightSet& a, const WeightSet& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& x = a.entries()[i];
    const auto& y = b.entries()[i];
    if (x.name != y.name || !torch::equal(x.value, y.value)) return false;
  }
  return true;
}

WeightSet extract_weights(const Detector& model, const std::set<Part>& parts) {
  if (parts.contains(Part::backbone)) {
    throw ConfigError("extract_weights: backbone weights are never extracted; request neck and/or head");
  }
  WeightSet out;
  for (Part p : parts) {
    for (const auto& [name, t] : model->named_part_parameters(p)) out.insert(name, t);
  }
  return out;
}

WeightSet extract_weights(const Detector& model, const std::vector<std::string>& part_names) {
  std::set<Part> parts;
  for (const auto& n : part_names) parts.insert(part_from_string(n));
  return extract_weights(model, parts);
}

WeightSet compute_delta(const WeightSet& w_t1, const WeightSet& w_t2, double gamma_delta) {
  if (!std::isfinite(gamma_delta)) throw ConfigError("compute_delta: gamma must be finite");
  std::vector<std::string> problems;
  for (const auto& e : w_t1.entries()) {
    const auto* o = w_t2.find(e.name);
    if (!o) problems.push_back(e.name + " (missing from second set)");
    else if (o->value.sizes() != e.value.sizes()) {
      problems.push_back(e.name + " (" + c10::str(e.value.sizes()) + " vs " + c10::str(o->value.sizes()) + ")");
    }
  }
  for (const auto& e : w_t2.entries()) {
    if (!w_t1.find(e.name)) problems.push_back(e.name + " (missing from first set)");
  }
  if (!problems.empty()) {
    std::string msg = "compute_delta: weight sets do not align:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ShapeError(msg);
  }
  WeightSet out;
  for (const auto& e : w_t1.entries()) out.insert(e.name, gamma_delta * w_t2.find(e.name)->value - e.value);
  return out;
}

std::string architecture_digest(const WeightSet& weights) {
  Sha256 h;
  for (const auto& e : weights.entries()) {
    h.update(e.name).update("|");
    for (auto s : e.value.sizes()) h.update_u64(static_cast<std::uint64_t>(s));
    h.update(";");
  }
  return to_hex(h.finish());
}

std::string architecture_digest(const Detector& model) { return architecture_digest(extract_weights(model)); }

Detector apply_delta(const Detector& model, const WeightSet& delta, double delta_update) {
  if (!std::isfinite(delta_update)) throw ConfigError("apply_delta: delta_update must be finite");
  std::set<Part> parts;
  for (const auto& e : delta.entries()) parts.insert(part_of(e.name));
  if (parts.empty()) throw DigestMismatchError("apply_delta: empty delta");
  const WeightSet current = extract_weights(model, parts);
  if (architecture_digest(current) != architecture_digest(delta)) {
    throw DigestMismatchError("apply_delta: delta architecture digest " + architecture_digest(delta) +
                              " does not match the model's " + architecture_digest(current));
  }
  Detector out = clone_detector(model);
  torch::NoGradGuard guard;
  auto params = out->named_parameters();
  for (const auto& e : delta.entries()) {
    auto& p = params[e.name];
    const auto updated = current.find(e.name)->value + delta_update * e.value;
    p.copy_(updated.to(p.scalar_type()));
  }
  return out;
}

Detector align_to_categories(const Detector& model, const std::vector<std::string>& categories) {
  const auto& have = model->config().categories;
  Detector out = with_categories(model, categories, 0);
  torch::NoGradGuard guard;
  auto& w = out->head()->cls_logits()->weight;
  auto& b = out->head()->cls_logits()->bias;
  for (std::size_t k = 0; k < categories.size(); ++k) {
    if (std::find(have.begin(), have.end(), categories[k]) != have.end()) continue;
    const auto row = static_cast<std::int64_t>(k);
    w[row].zero_();
    b[row].fill_(kAbsentClassBias);
  }
  return out;
}

Detector rename_categories(const Detector& model, const std::vector<std::string>& names) {
  Detector out = clone_detector(model);
  out->rename_categories(names);
  return out;
}

}  // namespace diredi
