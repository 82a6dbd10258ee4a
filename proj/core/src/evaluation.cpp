#include "diredi/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>

#include "diredi/error.hpp"
#include "diredi/hash.hpp"

namespace diredi {

std::string to_string(Interpolation interpolation) {
  return interpolation == Interpolation::all_point ? "all_point" : "eleven_point";
}

Interpolation interpolation_from_string(const std::string& name) {
  if (name == "all_point") return Interpolation::all_point;
  if (name == "eleven_point") return Interpolation::eleven_point;
  throw ConfigError("unknown AP interpolation '" + name + "'");
}

void EvalConfig::validate() const {
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) throw ConfigError("eval: iou_threshold must be in (0, 1)");
  if (!(score_threshold >= 0.0 && score_threshold <= 1.0)) throw ConfigError("eval: score_threshold must be in [0, 1]");
  if (batch_size < 1) throw ConfigError("eval: batch_size must be >= 1");
  if (image_size < 0) throw ConfigError("eval: image_size must be >= 0");
}

nlohmann::json EvalConfig::to_json() const {
  return {{"iou_threshold", iou_threshold},
          {"score_threshold", score_threshold},
          {"interpolation", to_string(interpolation)},
          {"inference",
           {{"score_threshold", inference.score_threshold},
            {"nms_iou", inference.nms_iou},
            {"max_detections", inference.max_detections},
            {"pre_nms_top_k", inference.pre_nms_top_k}}},
          {"batch_size", batch_size},
          {"image_size", image_size}};
}

EvalConfig EvalConfig::from_json(const nlohmann::json& j) {
  EvalConfig c;
  try {
    c.iou_threshold = j.value("iou_threshold", c.iou_threshold);
    c.score_threshold = j.value("score_threshold", c.score_threshold);
    c.interpolation = interpolation_from_string(j.value("interpolation", to_string(c.interpolation)));
    if (j.contains("inference")) {
      const auto& i = j.at("inference");
      c.inference.score_threshold = i.value("score_threshold", c.inference.score_threshold);
      c.inference.nms_iou = i.value("nms_iou", c.inference.nms_iou);
      c.inference.max_detections = i.value("max_detections", c.inference.max_detections);
      c.inference.pre_nms_top_k = i.value("pre_nms_top_k", c.inference.pre_nms_top_k);
    }
    c.batch_size = j.value("batch_size", c.batch_size);
    c.image_size = j.value("image_size", c.image_size);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("eval config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string EvalConfig::digest() const { return sha256_hex(to_json().dump()); }

// ---------------------------------------------------------------- matching

std::vector<MatchFlag> match_detections(const NamedDetections& detections, const NamedGroundTruth& ground_truth,
                                        double iou_threshold) {
  std::vector<MatchFlag> flags;
  flags.reserve(detections.size());
  std::vector<bool> matched(ground_truth.boxes.size(), false);
  for (std::size_t d = 0; d < detections.size(); ++d) {
    double best = -1.0;
    std::size_t best_g = 0;
    for (std::size_t g = 0; g < ground_truth.boxes.size(); ++g) {
      if (matched[g] || ground_truth.categories[g] != detections.categories[d]) continue;
      const double o = iou(detections.boxes[d], ground_truth.boxes[g]);
      if (o > best) {
        best = o;
        best_g = g;
      }
    }
    if (best >= iou_threshold) {
      const bool difficult = best_g < ground_truth.difficult.size() && ground_truth.difficult[best_g];
      if (difficult) {
        flags.push_back(MatchFlag::ignored);
      } else {
        matched[best_g] = true;
        flags.push_back(MatchFlag::tp);
      }
    } else {
      flags.push_back(MatchFlag::fp);
    }
  }
  return flags;
}

std::optional<double> average_precision(const std::vector<bool>& tp_flags, std::size_t num_gt,
                                        Interpolation interpolation) {
  if (num_gt == 0) return tp_flags.empty() ? std::nullopt : std::optional<double>(0.0);
  const std::size_t n = tp_flags.size();
  std::vector<double> precision(n), recall(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += tp_flags[i] ? 1 : 0;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(num_gt);
  }
  if (interpolation == Interpolation::eleven_point) {
    double ap = 0.0;
    for (int t = 0; t <= 10; ++t) {
      const double r = t / 10.0;
      double p = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (recall[i] >= r) p = std::max(p, precision[i]);
      }
      ap += p / 11.0;
    }
    return ap;
  }
  // Precision envelope, then the sum of rectangle areas at each recall step.
  std::vector<double> envelope = precision;
  for (std::size_t i = n; i-- > 1;) envelope[i - 1] = std::max(envelope[i - 1], envelope[i]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (recall[i] > prev_recall) {
      ap += (recall[i] - prev_recall) * envelope[i];
      prev_recall = recall[i];
    }
  }
  return ap;
}

double f1(double precision, double recall) {
  const double s = precision + recall;
  return s > 0.0 ? 2.0 * precision * recall / s : 0.0;
}

// ---------------------------------------------------------------- reports

double EvalReport::ap(const std::string& category) const {
  auto it = classes.find(category);
  return it == classes.end() || !it->second.ap ? 0.0 : *it->second.ap;
}

double EvalReport::mean_ap(const std::vector<std::string>& categories) const {
  double sum = 0.0;
  int n = 0;
  for (const auto& c : categories) {
    auto it = classes.find(c);
    if (it == classes.end() || !it->second.ap) continue;
    sum += *it->second.ap;
    ++n;
  }
  return n > 0 ? sum / n : 0.0;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [name, r] : classes) {
    per_class[name] = {{"ap", r.ap ? nlohmann::json(*r.ap) : nlohmann::json(nullptr)},
                       {"num_gt", r.num_gt},
                       {"num_detections", r.num_detections}};
  }
  return {{"per_class", per_class},     {"map", map},
          {"precision", precision},     {"recall", recall},
          {"f1", f1},                   {"true_positives", true_positives},
          {"false_positives", false_positives}, {"num_gt", num_gt},
          {"num_images", num_images},   {"config", config},
          {"config_digest", config_digest},     {"dataset_digest", dataset_digest}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    for (const auto& [name, c] : j.at("per_class").items()) {
      ClassResult cr;
      if (!c.at("ap").is_null()) cr.ap = c.at("ap").get<double>();
      cr.num_gt = c.at("num_gt").get<std::size_t>();
      cr.num_detections = c.at("num_detections").get<std::size_t>();
      r.classes[name] = cr;
    }
    r.map = j.at("map").get<double>();
    r.precision = j.at("precision").get<double>();
    r.recall = j.at("recall").get<double>();
    r.f1 = j.at("f1").get<double>();
    r.true_positives = j.value("true_positives", std::size_t{0});
    r.false_positives = j.value("false_positives", std::size_t{0});
    r.num_gt = j.value("num_gt", std::size_t{0});
    r.num_images = j.value("num_images", std::size_t{0});
    r.config = j.value("config", nlohmann::json::object());
    r.config_digest = j.value("config_digest", "");
    r.dataset_digest = j.value("dataset_digest", "");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("eval report: ") + e.what());
  }
  return r;
}

EvalReport evaluate_detections(const std::vector<NamedDetections>& detections,
                               const std::vector<NamedGroundTruth>& ground_truth,
                               const std::vector<std::string>& categories, const EvalConfig& config) {
  config.validate();
  if (detections.size() != ground_truth.size()) {
    throw ShapeError("evaluate_detections: detections for " + std::to_string(detections.size()) +
                     " images, ground truth for " + std::to_string(ground_truth.size()));
  }
  const std::set<std::string> wanted(categories.begin(), categories.end());

  struct Ranked {
    float score;
    std::size_t image, index;
    bool tp;
  };
  std::map<std::string, std::vector<Ranked>> ranked;
  std::map<std::string, std::size_t> num_gt;
  for (const auto& c : wanted) {
    ranked[c];
    num_gt[c] = 0;
  }

  EvalReport report;
  report.num_images = detections.size();
  for (std::size_t i = 0; i < detections.size(); ++i) {
    NamedGroundTruth gt;
    const auto& src_gt = ground_truth[i];
    for (std::size_t g = 0; g < src_gt.boxes.size(); ++g) {
      if (!wanted.contains(src_gt.categories[g])) continue;
      gt.boxes.push_back(src_gt.boxes[g]);
      gt.categories.push_back(src_gt.categories[g]);
      const bool diff = g < src_gt.difficult.size() && src_gt.difficult[g];
      gt.difficult.push_back(diff);
      if (!diff) ++num_gt[src_gt.categories[g]];
    }
    NamedDetections dets;
    std::vector<std::size_t> order;
    const auto& src = detections[i];
    for (std::size_t d = 0; d < src.size(); ++d) {
      if (wanted.contains(src.categories[d])) order.push_back(d);
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return src.scores[a] > src.scores[b]; });
    for (auto d : order) {
      dets.boxes.push_back(src.boxes[d]);
      dets.scores.push_back(src.scores[d]);
      dets.categories.push_back(src.categories[d]);
    }
    const auto flags = match_detections(dets, gt, config.iou_threshold);
    for (std::size_t d = 0; d < dets.size(); ++d) {
      if (flags[d] == MatchFlag::ignored) continue;
      const bool tp = flags[d] == MatchFlag::tp;
      ranked[dets.categories[d]].push_back({dets.scores[d], i, d, tp});
      if (dets.scores[d] >= config.score_threshold) (tp ? report.true_positives : report.false_positives)++;
    }
  }

  double ap_sum = 0.0;
  int ap_count = 0;
  for (auto& [category, list] : ranked) {
    std::sort(list.begin(), list.end(), [](const Ranked& a, const Ranked& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.image != b.image) return a.image < b.image;
      return a.index < b.index;
    });
    std::vector<bool> flags;
    flags.reserve(list.size());
    for (const auto& r : list) flags.push_back(r.tp);
    ClassResult cr;
    cr.num_gt = num_gt[category];
    cr.num_detections = list.size();
    cr.ap = average_precision(flags, cr.num_gt, config.interpolation);
    if (cr.ap) {
      ap_sum += *cr.ap;
      ++ap_count;
    }
    report.num_gt += cr.num_gt;
    report.classes[category] = cr;
  }
  report.map = ap_count > 0 ? ap_sum / ap_count : 0.0;
  const std::size_t predicted = report.true_positives + report.false_positives;
  report.precision = predicted > 0 ? static_cast<double>(report.true_positives) / static_cast<double>(predicted) : 0.0;
  report.recall =
      report.num_gt > 0 ? static_cast<double>(report.true_positives) / static_cast<double>(report.num_gt) : 0.0;
  report.f1 = f1(report.precision, report.recall);
  report.config = config.to_json();
  report.config_digest = config.digest();
  return report;
}

NamedGroundTruth named_ground_truth(const DetectionDataset& dataset, std::size_t index, int image_size) {
  const auto& ann = dataset.items.at(index).annotation;
  float sx = 1.f, sy = 1.f;
  if (image_size > 0 && ann.image_width > 0 && ann.image_height > 0) {
    sx = static_cast<float>(image_size) / static_cast<float>(ann.image_width);
    sy = static_cast<float>(image_size) / static_cast<float>(ann.image_height);
  }
  NamedGroundTruth gt;
  for (std::size_t k = 0; k < ann.size(); ++k) {
    const auto& b = ann.boxes[k];
    gt.boxes.push_back({b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy});
    gt.categories.push_back(dataset.label_name(ann.labels[k]));
    gt.difficult.push_back(ann.is_difficult(k));
  }
  return gt;
}

std::vector<NamedDetections> collect_detections(Detector& model, const DetectionDataset& dataset,
                                                const EvalConfig& config) {
  const auto& model_categories = model->config().categories;
  const LabelMap labels(dataset.category_names, model_categories, true);
  BatchOptions options;
  options.image_size = config.image_size;
  options.channels = model->config().in_channels;
  std::vector<NamedDetections> out;
  out.reserve(dataset.size());
  for (std::size_t start = 0; start < dataset.size(); start += static_cast<std::size_t>(config.batch_size)) {
    const std::size_t end = std::min(dataset.size(), start + static_cast<std::size_t>(config.batch_size));
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    Batch batch = make_batch(dataset, idx, labels, options);
    auto dets = infer(model, batch.images, config.inference);
    for (const auto& d : dets) {
      NamedDetections nd;
      nd.boxes = d.boxes;
      nd.scores = d.scores;
      for (int l : d.labels) nd.categories.push_back(model_categories.at(static_cast<std::size_t>(l)));
      out.push_back(std::move(nd));
    }
  }
  return out;
}

EvalReport evaluate(Detector& model, const DetectionDataset& dataset, const EvalConfig& config,
                    const std::vector<std::string>& categories) {
  config.validate();
  if (dataset.empty()) throw ConfigError("evaluate: empty dataset");
  std::vector<std::string> cats = categories;
  if (cats.empty()) {
    std::set<std::string> all = dataset.labelled_categories();
    for (const auto& c : model->config().categories) all.insert(c);
    cats.assign(all.begin(), all.end());
  }
  auto detections = collect_detections(model, dataset, config);
  std::vector<NamedGroundTruth> gt;
  gt.reserve(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) gt.push_back(named_ground_truth(dataset, i, config.image_size));
  EvalReport report = evaluate_detections(detections, gt, cats, config);
  report.dataset_digest = dataset_fingerprint(dataset);
  return report;
}

// ---------------------------------------------------------------- rendering

namespace {

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
  return buf;
}

}  // namespace

std::string render_comparison_table(const std::vector<ComparisonRow>& rows,
                                    const std::vector<std::string>& categories) {
  std::vector<std::string> header{"Model", "mAP (%)", "Precision (%)", "Recall (%)", "F1 (%)"};
  for (const auto& c : categories) header.push_back("AP " + c);
  std::vector<std::vector<std::string>> cells{header};
  for (const auto& row : rows) {
    std::vector<std::string> line{row.label, pct(row.report.map), pct(row.report.precision),
                                  pct(row.report.recall), pct(row.report.f1)};
    for (const auto& c : categories) {
      auto it = row.report.classes.find(c);
      line.push_back(it == row.report.classes.end() || !it->second.ap ? "-" : pct(*it->second.ap));
    }
    cells.push_back(std::move(line));
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells) {
    for (std::size_t k = 0; k < line.size(); ++k) width[k] = std::max(width[k], line[k].size());
  }
  std::ostringstream out;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t k = 0; k < cells[r].size(); ++k) {
      const auto& s = cells[r][k];
      if (k == 0) out << s << std::string(width[k] - s.size(), ' ');
      else out << " | " << std::string(width[k] - s.size(), ' ') << s;
    }
    out << '\n';
    if (r == 0) {
      for (std::size_t k = 0; k < width.size(); ++k) out << (k == 0 ? "" : "-+-") << std::string(width[k], '-');
      out << '\n';
    }
  }
  return out.str();
}

std::string render_ap_csv(const std::vector<ComparisonRow>& rows, const std::vector<std::string>& categories) {
  std::ostringstream out;
  out << "model,category,ap,num_gt\n";
  char buf[32];
  for (const auto& row : rows) {
    for (const auto& c : categories) {
      auto it = row.report.classes.find(c);
      out << row.label << ',' << c << ',';
      if (it != row.report.classes.end() && it->second.ap) {
        std::snprintf(buf, sizeof buf, "%.6f", *it->second.ap);
        out << buf;
      }
      out << ',' << (it == row.report.classes.end() ? 0 : it->second.num_gt) << '\n';
    }
  }
  return out.str();
}

}  // namespace diredi
