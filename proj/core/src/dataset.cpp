#include "diredi/dataset.hpp"

#include <algorithm>
#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <random>

#include "diredi/error.hpp"
#include "diredi/hash.hpp"

namespace diredi {

namespace fs = std::filesystem;

int DetectionDataset::category_index(const std::string& name) const {
  auto it = std::find(category_names.begin(), category_names.end(), name);
  return it == category_names.end() ? -1 : static_cast<int>(it - category_names.begin());
}

cv::Mat DetectionDataset::image(std::size_t i) const {
  const auto& item = items.at(i);
  if (!item.image.empty()) return item.image;
  cv::Mat m = cv::imread(item.image_path.string(), cv::IMREAD_COLOR);
  if (m.empty()) throw IoError("cannot decode image '" + item.image_path.string() + "'");
  return m;
}

std::set<std::string> DetectionDataset::labelled_categories() const {
  std::set<std::string> out;
  for (const auto& item : items) {
    for (int l : item.annotation.labels) out.insert(label_name(l));
  }
  return out;
}

std::string dataset_fingerprint(const DetectionDataset& dataset) {
  std::vector<std::string> item_digests;
  item_digests.reserve(dataset.size());
  for (const auto& item : dataset.items) {
    Sha256 h;
    if (!item.image.empty()) {
      cv::Mat m = item.image.isContinuous() ? item.image : item.image.clone();
      h.update("pixels");
      h.update_u64(static_cast<std::uint64_t>(m.rows)).update_u64(static_cast<std::uint64_t>(m.cols));
      h.update_u64(static_cast<std::uint64_t>(m.channels()));
      h.update(std::span(reinterpret_cast<const std::byte*>(m.data), m.total() * m.elemSize()));
    } else {
      h.update("id:").update(item.image_id);
    }
    const auto& ann = item.annotation;
    for (std::size_t k = 0; k < ann.size(); ++k) {
      const auto& b = ann.boxes[k];
      for (float v : {b.x1, b.y1, b.x2, b.y2}) {
        std::uint32_t bits = 0;
        std::memcpy(&bits, &v, sizeof bits);
        h.update_u64(bits);
      }
      h.update(dataset.label_name(ann.labels[k]));
      h.update_u64(ann.is_difficult(k) ? 1 : 0);
    }
    item_digests.push_back(to_hex(h.finish()));
  }
  std::sort(item_digests.begin(), item_digests.end());
  Sha256 all;
  for (const auto& d : item_digests) all.update(d);
  return to_hex(all.finish());
}

// ---------------------------------------------------------------- plans

namespace {

std::set<std::string> as_set(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

}  // namespace

void CategoryPlan::validate() const {
  const auto teacher = as_set(teacher_categories);
  const auto presumed = as_set(presumed_categories);
  for (const auto& c : presumed_categories) {
    if (!teacher.empty() && !teacher.contains(c)) {
      throw ConfigError("category plan: presumed category '" + c + "' is not a teacher category");
    }
  }
  for (const auto& c : private_categories) {
    if (presumed.contains(c)) throw ConfigError("category plan: '" + c + "' is both presumed and private");
  }
  for (const auto& c : removed_categories) {
    if (!presumed.contains(c)) throw ConfigError("category plan: removed '" + c + "' is not presumed");
  }
}

nlohmann::json CategoryPlan::to_json() const {
  return {{"teacher_categories", teacher_categories}, {"presumed_categories", presumed_categories},
          {"private_categories", private_categories}, {"removed_categories", removed_categories},
          {"eval_categories", eval_categories}};
}

CategoryPlan CategoryPlan::from_json(const nlohmann::json& j) {
  CategoryPlan p;
  try {
    p.teacher_categories = j.value("teacher_categories", std::vector<std::string>{});
    p.presumed_categories = j.at("presumed_categories").get<std::vector<std::string>>();
    p.private_categories = j.value("private_categories", std::vector<std::string>{});
    p.removed_categories = j.value("removed_categories", std::vector<std::string>{});
    p.eval_categories = j.value("eval_categories", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("category plan: ") + e.what());
  }
  p.validate();
  return p;
}

CategoryPlan CategoryPlan::voc_experiment1() {
  CategoryPlan p;
  p.teacher_categories = {"aeroplane", "bus", "horse", "motorbike", "person",
                          "cat",       "dog", "car",   "bicycle",   "train"};
  p.presumed_categories = {"aeroplane", "bus", "horse", "motorbike", "person"};
  p.private_categories = {"cat"};
  p.eval_categories = {"aeroplane", "bus", "horse", "motorbike", "person", "cat"};
  return p;
}

CategoryPlan CategoryPlan::voc_experiment2() {
  CategoryPlan p = voc_experiment1();
  p.private_categories = {"dog"};
  p.removed_categories = {"horse"};
  p.eval_categories = {"aeroplane", "bus", "horse", "motorbike", "person", "dog"};
  return p;
}

CategoryPlan CategoryPlan::toy_experiment1() {
  CategoryPlan p;
  p.teacher_categories = toy_shape_classes();
  p.presumed_categories = {"disc", "square", "triangle", "cross", "bar"};
  p.private_categories = {"star"};
  p.eval_categories = {"disc", "square", "triangle", "cross", "bar", "star"};
  return p;
}

CategoryPlan CategoryPlan::toy_experiment2() {
  CategoryPlan p = toy_experiment1();
  p.private_categories = {"chevron"};
  p.removed_categories = {"triangle"};
  p.eval_categories = {"disc", "square", "triangle", "cross", "bar", "chevron"};
  return p;
}

std::string to_string(SplitMode mode) {
  switch (mode) {
    case SplitMode::presumed: return "presumed";
    case SplitMode::customer_actual: return "customer_actual";
    case SplitMode::verification: return "verification";
  }
  return "presumed";
}

SplitMode split_mode_from_string(const std::string& name) {
  if (name == "presumed") return SplitMode::presumed;
  if (name == "customer_actual") return SplitMode::customer_actual;
  if (name == "verification") return SplitMode::verification;
  throw ConfigError("unknown split mode '" + name + "'");
}

std::vector<std::string> plan_categories(const CategoryPlan& plan, SplitMode mode) {
  const auto removed = as_set(plan.removed_categories);
  std::vector<std::string> out;
  for (const auto& c : plan.presumed_categories) {
    if (mode == SplitMode::verification || !removed.contains(c)) out.push_back(c);
  }
  if (mode == SplitMode::customer_actual) {
    for (const auto& c : plan.private_categories) out.push_back(c);
  }
  return out;
}

DetectionDataset filter_categories(const DetectionDataset& dataset, const std::set<std::string>& keep,
                                   const FilterPolicy& policy) {
  DetectionDataset out;
  out.category_names = dataset.category_names;
  out.provenance = dataset.provenance;
  for (const auto& item : dataset.items) {
    const auto& ann = item.annotation;
    std::vector<std::size_t> kept, excluded;
    for (std::size_t k = 0; k < ann.size(); ++k) {
      (keep.contains(dataset.label_name(ann.labels[k])) ? kept : excluded).push_back(k);
    }
    if (kept.empty()) continue;
    if (policy.strict_drop) {
      bool clash = false;
      for (auto e : excluded) {
        for (auto k : kept) clash = clash || iou(ann.boxes[e], ann.boxes[k]) > policy.overlap_iou;
      }
      if (clash) continue;
    }
    DetectionItem copy = item;
    copy.annotation.boxes.clear();
    copy.annotation.labels.clear();
    copy.annotation.difficult.clear();
    for (auto k : kept) {
      copy.annotation.boxes.push_back(ann.boxes[k]);
      copy.annotation.labels.push_back(ann.labels[k]);
      copy.annotation.difficult.push_back(ann.is_difficult(k));
    }
    out.items.push_back(std::move(copy));
  }
  return out;
}

DetectionDataset split_by_plan(const DetectionDataset& dataset, const CategoryPlan& plan, SplitMode mode,
                               const FilterPolicy& policy) {
  plan.validate();
  return filter_categories(dataset, as_set(plan_categories(plan, mode)), policy);
}

// ---------------------------------------------------------------- toy data

void ToySpec::validate() const {
  if (num_images < 0) throw ConfigError("toy spec: num_images must be >= 0");
  if (classes.empty()) throw ConfigError("toy spec: no classes");
  for (const auto& c : classes) {
    if (std::find(toy_shape_classes().begin(), toy_shape_classes().end(), c) == toy_shape_classes().end()) {
      throw ConfigError("toy spec: unknown shape class '" + c + "'");
    }
  }
  if (as_set(classes).size() != classes.size()) throw ConfigError("toy spec: duplicate classes");
  if (channels != 1 && channels != 3) throw ConfigError("toy spec: channels must be 1 or 3");
  if (min_objects < 0 || max_objects < min_objects) throw ConfigError("toy spec: bad objects-per-image range");
  if (min_size < 4 || max_size < min_size) throw ConfigError("toy spec: bad object size range");
  if (canvas % 32 != 0) throw ConfigError("toy spec: canvas must be a multiple of 32");
  if (max_objects > 0) {
    // Every object must fit, and the worst case must be packable side by side.
    const int per_row = canvas / (min_size + 2);
    if (max_size + 2 > canvas || per_row * per_row < max_objects) {
      throw ConfigError("toy spec: canvas too small for the object range");
    }
  }
}

nlohmann::json ToySpec::to_json() const {
  return {{"num_images", num_images}, {"canvas", canvas},           {"channels", channels},
          {"classes", classes},       {"min_objects", min_objects}, {"max_objects", max_objects},
          {"min_size", min_size},     {"max_size", max_size},       {"noise", noise},
          {"seed", seed},             {"id_prefix", id_prefix}};
}

ToySpec ToySpec::from_json(const nlohmann::json& j) { return from_json(j, ToySpec{}); }

ToySpec ToySpec::from_json(const nlohmann::json& j, const ToySpec& d) {
  ToySpec s = d;
  s.num_images = j.value("num_images", s.num_images);
  s.canvas = j.value("canvas", s.canvas);
  s.channels = j.value("channels", s.channels);
  s.classes = j.value("classes", s.classes);
  s.min_objects = j.value("min_objects", s.min_objects);
  s.max_objects = j.value("max_objects", s.max_objects);
  s.min_size = j.value("min_size", s.min_size);
  s.max_size = j.value("max_size", s.max_size);
  s.noise = j.value("noise", s.noise);
  s.seed = j.value("seed", s.seed);
  s.id_prefix = j.value("id_prefix", s.id_prefix);
  s.validate();
  return s;
}

namespace {

using Poly = std::vector<cv::Point>;

Poly regular_star(cv::Point2f c, float r_out, float r_in, int points, float phase) {
  Poly p;
  for (int i = 0; i < 2 * points; ++i) {
    const float r = (i % 2 == 0) ? r_out : r_in;
    const float a = phase + static_cast<float>(i) * std::numbers::pi_v<float> / static_cast<float>(points);
    p.emplace_back(cvRound(c.x + r * std::cos(a)), cvRound(c.y + r * std::sin(a)));
  }
  return p;
}

// Draws shape `cls` into a single-channel mask inside rect r.
void draw_shape(cv::Mat& mask, const std::string& cls, const cv::Rect& r) {
  const cv::Point2f c(static_cast<float>(r.x) + r.width / 2.f, static_cast<float>(r.y) + r.height / 2.f);
  const float rx = r.width / 2.f, ry = r.height / 2.f;
  const cv::Scalar on(255);
  const int x0 = r.x, y0 = r.y, x1 = r.x + r.width - 1, y1 = r.y + r.height - 1;
  if (cls == "disc") {
    cv::ellipse(mask, cv::RotatedRect(c, cv::Size2f(2 * rx, 2 * ry), 0), on, cv::FILLED);
  } else if (cls == "square") {
    cv::rectangle(mask, cv::Point(x0, y0), cv::Point(x1, y1), on, cv::FILLED);
  } else if (cls == "triangle") {
    Poly p{{cvRound(c.x), y0}, {x0, y1}, {x1, y1}};
    cv::fillPoly(mask, std::vector<Poly>{p}, on);
  } else if (cls == "ring") {
    const int t = std::max(2, r.width / 5);
    cv::ellipse(mask, cv::RotatedRect(c, cv::Size2f(2 * rx - t, 2 * ry - t), 0), on, t);
  } else if (cls == "cross") {
    const int t = std::max(2, r.width / 4);
    cv::rectangle(mask, cv::Point(x0, cvRound(c.y) - t / 2), cv::Point(x1, cvRound(c.y) + t / 2), on, cv::FILLED);
    cv::rectangle(mask, cv::Point(cvRound(c.x) - t / 2, y0), cv::Point(cvRound(c.x) + t / 2, y1), on, cv::FILLED);
  } else if (cls == "star") {
    cv::fillPoly(mask, std::vector<Poly>{regular_star(c, std::min(rx, ry), std::min(rx, ry) * 0.42f, 5,
                                                      -std::numbers::pi_v<float> / 2)},
                 on);
  } else if (cls == "bar") {
    const int t = std::max(3, r.height / 3);
    cv::rectangle(mask, cv::Point(x0, cvRound(c.y) - t / 2), cv::Point(x1, cvRound(c.y) + t / 2), on, cv::FILLED);
  } else if (cls == "diamond") {
    Poly p{{cvRound(c.x), y0}, {x1, cvRound(c.y)}, {cvRound(c.x), y1}, {x0, cvRound(c.y)}};
    cv::fillPoly(mask, std::vector<Poly>{p}, on);
  } else if (cls == "crescent") {
    cv::ellipse(mask, cv::RotatedRect(c, cv::Size2f(2 * rx, 2 * ry), 0), on, cv::FILLED);
    cv::ellipse(mask, cv::RotatedRect(cv::Point2f(c.x + rx * 0.45f, c.y - ry * 0.2f), cv::Size2f(1.6f * rx, 1.6f * ry), 0),
                cv::Scalar(0), cv::FILLED);
  } else if (cls == "chevron") {
    const int t = std::max(3, r.width / 4);
    Poly p{{x0, y0}, {x0 + t, y0}, {cvRound(c.x), y1 - t}, {x1 - t, y0}, {x1, y0}, {cvRound(c.x), y1}};
    cv::fillPoly(mask, std::vector<Poly>{p}, on);
  } else {
    throw ConfigError("unknown shape class '" + cls + "'");
  }
}

}  // namespace

DetectionDataset generate_toy_dataset(const ToySpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  auto uniform_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

  std::vector<int> counts(static_cast<std::size_t>(spec.num_images));
  int total = 0;
  for (auto& n : counts) total += (n = uniform_int(spec.min_objects, spec.max_objects));
  std::vector<int> classes(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i) classes[i] = i % static_cast<int>(spec.classes.size());
  std::shuffle(classes.begin(), classes.end(), rng);

  DetectionDataset ds;
  ds.category_names = spec.classes;
  ds.provenance = Provenance::synthetic;
  const int type = spec.channels == 3 ? CV_8UC3 : CV_8UC1;
  std::size_t next_class = 0;
  for (int n = 0; n < spec.num_images; ++n) {
    DetectionItem item;
    item.image_id = spec.id_prefix + "_" + std::to_string(n);
    const double bg_level = uniform(10, 70);
    cv::Mat img(spec.canvas, spec.canvas, type, cv::Scalar::all(bg_level));
    if (spec.channels == 3) img.setTo(cv::Scalar(uniform(10, 70), uniform(10, 70), uniform(10, 70)));
    // Rejection-sample a non-overlapping layout, shrinking objects as attempts
    // fail and restarting the whole image when an object cannot be placed.
    std::vector<cv::Rect> placed;
    for (int restart = 0; restart < 50 && static_cast<int>(placed.size()) < counts[n]; ++restart) {
      placed.clear();
      for (int k = 0; k < counts[n]; ++k) {
        bool ok = false;
        for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
          const int hi = std::max(spec.min_size, spec.max_size - attempt / 10);
          const int size = uniform_int(spec.min_size, hi);
          const int w = std::clamp(static_cast<int>(size * uniform(0.85, 1.15)), spec.min_size, spec.canvas - 2);
          const int h = std::clamp(static_cast<int>(size * uniform(0.85, 1.15)), spec.min_size, spec.canvas - 2);
          const cv::Rect rect(uniform_int(1, spec.canvas - w - 1), uniform_int(1, spec.canvas - h - 1), w, h);
          ok = std::none_of(placed.begin(), placed.end(), [&](const cv::Rect& o) {
            const cv::Rect grown(o.x - 2, o.y - 2, o.width + 4, o.height + 4);
            return (grown & rect).area() > 0;
          });
          if (ok) placed.push_back(rect);
        }
        if (!ok) break;
      }
    }
    if (static_cast<int>(placed.size()) < counts[n]) {
      throw ConfigError("toy spec: failed to place objects; canvas too small for the object range");
    }
    for (int k = 0; k < counts[n]; ++k) {
      const int cls = classes[next_class++];
      const cv::Rect rect = placed[static_cast<std::size_t>(k)];
      cv::Mat mask = cv::Mat::zeros(spec.canvas, spec.canvas, CV_8UC1);
      draw_shape(mask, spec.classes[cls], rect);
      const cv::Rect tight = cv::boundingRect(mask);
      const cv::Scalar colour = spec.channels == 3
                                    ? cv::Scalar(uniform(140, 255), uniform(140, 255), uniform(140, 255))
                                    : cv::Scalar::all(uniform(140, 255));
      img.setTo(colour, mask);
      item.annotation.boxes.push_back({static_cast<float>(tight.x), static_cast<float>(tight.y),
                                       static_cast<float>(tight.x + tight.width),
                                       static_cast<float>(tight.y + tight.height)});
      item.annotation.labels.push_back(cls);
      item.annotation.difficult.push_back(false);
    }
    if (spec.noise > 0) {
      cv::Mat noise(img.size(), CV_32FC(spec.channels));
      cv::Mat imgf;
      img.convertTo(imgf, CV_32FC(spec.channels));
      // cv::randn draws from OpenCV's global RNG; seed a local one instead.
      cv::RNG cvrng(rng());
      cvrng.fill(noise, cv::RNG::NORMAL, 0.0, spec.noise * 255.0);
      imgf += noise;
      imgf.convertTo(img, type);
    }
    item.annotation.image_id = item.image_id;
    item.annotation.image_width = spec.canvas;
    item.annotation.image_height = spec.canvas;
    item.image = img;
    ds.items.push_back(std::move(item));
  }
  return ds;
}

// ---------------------------------------------------------------- VOC

DetectionDataset load_voc(const fs::path& root, const std::vector<std::string>& years, const std::string& split,
                          const std::vector<std::string>& plan) {
  DetectionDataset ds;
  ds.category_names = plan;
  ds.provenance = Provenance::voc;
  if (plan.empty()) return ds;
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < plan.size(); ++i) index[plan[i]] = static_cast<int>(i);

  std::vector<std::string> missing;
  for (const auto& year : years) {
    const fs::path base = root / ("VOC" + year);
    const fs::path list = base / "ImageSets" / "Main" / (split + ".txt");
    std::ifstream in(list);
    if (!in) throw IoError("VOC split list not found: " + list.string());
    std::string id;
    while (in >> id) {
      const fs::path xml = base / "Annotations" / (id + ".xml");
      if (!fs::exists(xml)) {
        missing.push_back(xml.string());
        continue;
      }
      boost::property_tree::ptree tree;
      try {
        boost::property_tree::read_xml(xml.string(), tree);
      } catch (const std::exception& e) {
        throw FormatError("VOC annotation '" + xml.string() + "': " + e.what());
      }
      const auto& anno = tree.get_child("annotation");
      DetectionItem item;
      item.image_id = year + "_" + id;
      item.image_path = base / "JPEGImages" / (id + ".jpg");
      item.annotation.image_id = item.image_id;
      item.annotation.image_width = anno.get<int>("size.width", 0);
      item.annotation.image_height = anno.get<int>("size.height", 0);
      for (const auto& [key, obj] : anno) {
        if (key != "object") continue;
        auto it = index.find(obj.get<std::string>("name"));
        if (it == index.end()) continue;
        // VOC pixel indices are 1-based and inclusive.
        Box b{obj.get<float>("bndbox.xmin") - 1.f, obj.get<float>("bndbox.ymin") - 1.f,
              obj.get<float>("bndbox.xmax"), obj.get<float>("bndbox.ymax")};
        item.annotation.boxes.push_back(b);
        item.annotation.labels.push_back(it->second);
        item.annotation.difficult.push_back(obj.get<int>("difficult", 0) != 0);
      }
      if (!item.annotation.boxes.empty()) ds.items.push_back(std::move(item));
    }
  }
  if (!missing.empty()) {
    std::string msg = "VOC annotation files missing (" + std::to_string(missing.size()) + "):";
    for (std::size_t i = 0; i < std::min<std::size_t>(missing.size(), 20); ++i) msg += "\n  " + missing[i];
    throw IoError(msg);
  }
  return ds;
}

// ---------------------------------------------------------------- persistence

void save_dataset(const DetectionDataset& dataset, const fs::path& dir) {
  fs::create_directories(dir);
  nlohmann::json items = nlohmann::json::array();
  for (const auto& item : dataset.items) {
    fs::path image_path = item.image_path;
    if (image_path.empty()) {
      image_path = dir / "images" / (item.image_id + ".png");
      fs::create_directories(image_path.parent_path());
      if (!cv::imwrite(image_path.string(), item.image)) {
        throw IoError("cannot write image '" + image_path.string() + "'");
      }
    }
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : item.annotation.boxes) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
    std::vector<int> difficult;
    for (std::size_t k = 0; k < item.annotation.size(); ++k) difficult.push_back(item.annotation.is_difficult(k));
    items.push_back({{"image_id", item.image_id},
                     {"image", fs::relative(fs::absolute(image_path), fs::absolute(dir)).generic_string()},
                     {"width", item.annotation.image_width},
                     {"height", item.annotation.image_height},
                     {"boxes", boxes},
                     {"labels", item.annotation.labels},
                     {"difficult", difficult}});
  }
  nlohmann::json doc = {{"format_version", 1},
                        {"provenance", dataset.provenance == Provenance::voc ? "voc" : "synthetic"},
                        {"category_names", dataset.category_names},
                        {"fingerprint", dataset_fingerprint(dataset)},
                        {"items", items}};
  std::ofstream out(dir / "annotations.json");
  if (!out) throw IoError("cannot write '" + (dir / "annotations.json").string() + "'");
  out << doc.dump(1) << '\n';
}

DetectionDataset load_dataset(const fs::path& dir) {
  const fs::path file = dir / "annotations.json";
  std::ifstream in(file);
  if (!in) throw IoError("dataset annotation file not found: " + file.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("dataset '" + file.string() + "': " + e.what());
  }
  if (doc.value("format_version", 0) != 1) throw FormatError("dataset '" + file.string() + "': unknown version");
  DetectionDataset ds;
  ds.category_names = doc.at("category_names").get<std::vector<std::string>>();
  ds.provenance = doc.value("provenance", "synthetic") == "voc" ? Provenance::voc : Provenance::synthetic;
  for (const auto& j : doc.at("items")) {
    DetectionItem item;
    item.image_id = j.at("image_id").get<std::string>();
    item.image_path = (dir / j.at("image").get<std::string>()).lexically_normal();
    item.annotation.image_id = item.image_id;
    item.annotation.image_width = j.value("width", 0);
    item.annotation.image_height = j.value("height", 0);
    for (const auto& b : j.at("boxes")) {
      item.annotation.boxes.push_back({b[0].get<float>(), b[1].get<float>(), b[2].get<float>(), b[3].get<float>()});
    }
    item.annotation.labels = j.at("labels").get<std::vector<int>>();
    for (int d : j.value("difficult", std::vector<int>{})) item.annotation.difficult.push_back(d != 0);
    for (int l : item.annotation.labels) {
      if (l < 0 || l >= static_cast<int>(ds.category_names.size())) {
        throw FormatError("dataset '" + file.string() + "': label out of range in " + item.image_id);
      }
    }
    if (ds.provenance == Provenance::synthetic) {
      item.image = cv::imread(item.image_path.string(), cv::IMREAD_UNCHANGED);
      if (item.image.empty()) throw IoError("cannot decode image '" + item.image_path.string() + "'");
    }
    ds.items.push_back(std::move(item));
  }
  return ds;
}

// ---------------------------------------------------------------- batching

LabelMap::LabelMap(const std::vector<std::string>& dataset_categories,
                   const std::vector<std::string>& model_categories, bool drop_unknown)
    : drop_unknown_(drop_unknown), names_(dataset_categories) {
  for (const auto& name : dataset_categories) {
    auto it = std::find(model_categories.begin(), model_categories.end(), name);
    map_.push_back(it == model_categories.end() ? -1 : static_cast<int>(it - model_categories.begin()));
  }
}

std::optional<int> LabelMap::operator()(int dataset_label) const {
  const int m = map_.at(static_cast<std::size_t>(dataset_label));
  if (m >= 0) return m;
  if (drop_unknown_) return std::nullopt;
  throw ConfigError("category '" + names_.at(static_cast<std::size_t>(dataset_label)) +
                    "' is not among the model's classes");
}

torch::Tensor image_to_tensor(const cv::Mat& image, int channels) {
  cv::Mat src = image;
  if (channels == 3 && src.channels() == 1) cv::cvtColor(src, src, cv::COLOR_GRAY2BGR);
  if (channels == 1 && src.channels() == 3) cv::cvtColor(src, src, cv::COLOR_BGR2GRAY);
  if (src.channels() != channels) throw ShapeError("image has an unsupported channel count");
  cv::Mat f;
  src.convertTo(f, CV_32FC(channels), 1.0 / 255.0);
  if (!f.isContinuous()) f = f.clone();
  auto t = torch::from_blob(f.data, {f.rows, f.cols, channels}, torch::kFloat32).clone();
  return ((t - 0.5) / 0.25).permute({2, 0, 1}).contiguous();
}

Batch make_batch(const DetectionDataset& dataset, std::span<const std::size_t> indices, const LabelMap& labels,
                 const BatchOptions& options) {
  Batch batch;
  std::vector<torch::Tensor> images;
  for (auto i : indices) {
    cv::Mat img = dataset.image(i);
    const auto& src = dataset.items[i].annotation;
    float sx = 1.f, sy = 1.f;
    if (options.image_size > 0 && (img.cols != options.image_size || img.rows != options.image_size)) {
      sx = static_cast<float>(options.image_size) / static_cast<float>(img.cols);
      sy = static_cast<float>(options.image_size) / static_cast<float>(img.rows);
      cv::resize(img, img, cv::Size(options.image_size, options.image_size), 0, 0, cv::INTER_LINEAR);
    }
    if (options.hflip) {
      // dataset.image() shares the cached buffer; flip into fresh storage.
      cv::Mat flipped;
      cv::flip(img, flipped, 1);
      img = flipped;
    }
    const auto w = static_cast<float>(img.cols);
    const auto h = static_cast<float>(img.rows);
    Annotation ann;
    ann.image_id = src.image_id;
    ann.image_width = img.cols;
    ann.image_height = img.rows;
    for (std::size_t k = 0; k < src.size(); ++k) {
      auto mapped = labels(src.labels[k]);
      if (!mapped) continue;
      Box b{src.boxes[k].x1 * sx, src.boxes[k].y1 * sy, src.boxes[k].x2 * sx, src.boxes[k].y2 * sy};
      if (options.hflip) b = {w - b.x2, b.y1, w - b.x1, b.y2};
      b = clip_box(b, w, h);
      if (!b.valid()) continue;
      ann.boxes.push_back(b);
      ann.labels.push_back(*mapped);
      ann.difficult.push_back(src.is_difficult(k));
    }
    images.push_back(image_to_tensor(img, options.channels));
    batch.annotations.push_back(std::move(ann));
  }
  batch.images = torch::stack(images);
  return batch;
}

}  // namespace diredi
