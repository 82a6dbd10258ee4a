#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "diredi/annotation.hpp"

namespace diredi {

enum class Provenance { voc, synthetic };

struct DetectionItem {
  std::string image_id;
  std::filesystem::path image_path;  // may be empty for in-memory images
  cv::Mat image;                     // cached pixels (8-bit, 1 or 3 channels); empty until loaded
  Annotation annotation;             // labels index DetectionDataset::category_names
};

// Immutable after construction; copies share pixel buffers.
struct DetectionDataset {
  std::vector<DetectionItem> items;
  std::vector<std::string> category_names;
  Provenance provenance = Provenance::synthetic;

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
  int category_index(const std::string& name) const;  // -1 if absent
  const std::string& label_name(int label) const { return category_names.at(static_cast<std::size_t>(label)); }
  cv::Mat image(std::size_t i) const;
  // Category names that label at least one box.
  std::set<std::string> labelled_categories() const;
};

// Stable, order-independent content hash: items are hashed individually
// (pixels when cached, otherwise the image id; boxes; label names) and the
// sorted item digests are hashed together.
std::string dataset_fingerprint(const DetectionDataset& dataset);

// ---------------------------------------------------------------- plans

// Which categories the manufacturer presumed, which the customer adds from
// private data, and which the customer no longer needs.
struct CategoryPlan {
  std::vector<std::string> teacher_categories;
  std::vector<std::string> presumed_categories;
  std::vector<std::string> private_categories;
  std::vector<std::string> removed_categories;
  std::vector<std::string> eval_categories;

  void validate() const;
  nlohmann::json to_json() const;
  static CategoryPlan from_json(const nlohmann::json& j);

  // Learn-a-category plan on VOC names: five presumed, "cat" private.
  static CategoryPlan voc_experiment1();
  // Forget-and-learn plan on VOC names: "horse" removed, "dog" private.
  static CategoryPlan voc_experiment2();
  // The same roles on toy shape classes.
  static CategoryPlan toy_experiment1();
  static CategoryPlan toy_experiment2();
};

enum class SplitMode {
  presumed,         // presumed \ removed
  customer_actual,  // (presumed \ removed) u private
  verification,     // presumed (the manufacturer-retained set)
};

std::string to_string(SplitMode mode);
SplitMode split_mode_from_string(const std::string& name);
std::vector<std::string> plan_categories(const CategoryPlan& plan, SplitMode mode);

struct FilterPolicy {
  // Drop an image when an excluded object overlaps a kept one above this IoU.
  double overlap_iou = 0.3;
  bool strict_drop = true;
};

// Keeps boxes whose category is in `keep`; drops images left without boxes
// and (strict policy) images where excluded objects overlap kept ones.
DetectionDataset filter_categories(const DetectionDataset& dataset, const std::set<std::string>& keep,
                                   const FilterPolicy& policy = {});

DetectionDataset split_by_plan(const DetectionDataset& dataset, const CategoryPlan& plan, SplitMode mode,
                               const FilterPolicy& policy = {});

// ---------------------------------------------------------------- toy data

inline const std::vector<std::string>& toy_shape_classes() {
  static const std::vector<std::string> kClasses{"disc", "square", "triangle", "ring",     "cross",
                                                 "star", "bar",    "diamond",  "crescent", "chevron"};
  return kClasses;
}

struct ToySpec {
  int num_images = 500;
  int canvas = 64;
  int channels = 3;
  std::vector<std::string> classes = toy_shape_classes();
  int min_objects = 1;
  int max_objects = 3;
  int min_size = 14;
  int max_size = 30;
  double noise = 0.04;
  std::uint64_t seed = 0;
  std::string id_prefix = "toy";

  void validate() const;
  nlohmann::json to_json() const;
  static ToySpec from_json(const nlohmann::json& j);
  static ToySpec from_json(const nlohmann::json& j, const ToySpec& defaults);
};

// Deterministic under `spec.seed`. Objects do not overlap; boxes are the
// tight bounds of the rendered pixels; class counts differ by at most one
// before placement.
DetectionDataset generate_toy_dataset(const ToySpec& spec);

// ---------------------------------------------------------------- VOC

// Reads <root>/VOC<year>/{Annotations,JPEGImages,ImageSets/Main/<split>.txt}.
// Images without a box of a plan category are skipped; boxes of other
// categories are removed. Difficult boxes are kept and flagged.
DetectionDataset load_voc(const std::filesystem::path& root, const std::vector<std::string>& years,
                          const std::string& split, const std::vector<std::string>& plan_categories);

inline const std::vector<std::string>& voc_categories() {
  static const std::vector<std::string> kNames{
      "aeroplane", "bicycle", "bird",  "boat",        "bottle", "bus",   "car",   "cat",   "chair", "cow",
      "diningtable", "dog",   "horse", "motorbike",   "person", "pottedplant", "sheep", "sofa", "train", "tvmonitor"};
  return kNames;
}

// ---------------------------------------------------------------- persistence

// <dir>/annotations.json plus, for in-memory images, <dir>/images/<id>.png.
// Image paths are stored relative to <dir>.
void save_dataset(const DetectionDataset& dataset, const std::filesystem::path& dir);
// Images are decoded eagerly for synthetic datasets and on demand for VOC.
DetectionDataset load_dataset(const std::filesystem::path& dir);

// ---------------------------------------------------------------- batching

struct Batch {
  torch::Tensor images;                 // [B, C, H, W] float
  std::vector<Annotation> annotations;  // labels remapped to model class indices
};

struct BatchOptions {
  int image_size = 0;  // square resize target; 0 keeps native resolution
  int channels = 3;
  bool hflip = false;  // flip every image of the batch
};

// Maps dataset label ids onto a model's category order. Labels whose
// category the model lacks either throw ConfigError or are dropped.
class LabelMap {
 public:
  LabelMap(const std::vector<std::string>& dataset_categories, const std::vector<std::string>& model_categories,
           bool drop_unknown = false);
  std::optional<int> operator()(int dataset_label) const;

 private:
  std::vector<int> map_;
  bool drop_unknown_;
  std::vector<std::string> names_;
};

Batch make_batch(const DetectionDataset& dataset, std::span<const std::size_t> indices, const LabelMap& labels,
                 const BatchOptions& options = {});

torch::Tensor image_to_tensor(const cv::Mat& image, int channels);

}  // namespace diredi
