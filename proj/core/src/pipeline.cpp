#include "diredi/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "diredi/checkpoint.hpp"
#include "diredi/error.hpp"
#include "diredi/hash.hpp"
#include "diredi/log.hpp"
#include "diredi/packet.hpp"
#include "diredi/tensor_archive.hpp"
#include "diredi/weights.hpp"

namespace diredi {

namespace fs = std::filesystem;

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> kNames{"train_large",   "distill_A", "distill_B",    "rd_emulation",
                                               "rd_customer",   "extract_delta", "apply_delta", "verify",
                                               "distill_C",     "evaluate_all",  "baseline_direct"};
  return kNames;
}

const std::vector<ModelRow>& comparison_model_rows() {
  static const std::vector<ModelRow> kRows{
      {"large", "Large model"},
      {"tutor", "Original tutor (Distill A)"},
      {"tutor1", "Tutor 1 (rd_emulation, ReDi B)"},
      {"tutor2", "Tutor 2 (rd_customer, ReDi A)"},
      {"updated_tutor", "Updated tutor"},
      {"edge", "Original edge model (Distill B)"},
      {"edge_direct", "Updated edge model (training)"},
      {"edge_distill_c", "Updated edge model (Distill C)"},
  };
  return kRows;
}

// ---------------------------------------------------------------- json io

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  const std::string text = j.dump(2) + "\n";
  write_file_bytes(path, std::span(reinterpret_cast<const std::byte*>(text.data()), text.size()));
}

// ---------------------------------------------------------------- plan

nlohmann::json DataSourceConfig::to_json() const {
  return {{"source", source},
          {"toy", toy.to_json()},
          {"manufacturer_images", manufacturer_images},
          {"customer_images", customer_images},
          {"eval_images", eval_images},
          {"voc_root", voc_root.string()},
          {"train_years", train_years},
          {"train_split", train_split},
          {"eval_years", eval_years},
          {"eval_split", eval_split},
          {"customer_fraction", customer_fraction},
          {"image_size", image_size},
          {"filter", {{"overlap_iou", filter.overlap_iou}, {"strict_drop", filter.strict_drop}}}};
}

DataSourceConfig DataSourceConfig::from_json(const nlohmann::json& j) {
  DataSourceConfig d;
  d.source = j.value("source", d.source);
  if (d.source != "toy" && d.source != "voc") throw ConfigError("data: source must be 'toy' or 'voc'");
  if (j.contains("toy")) d.toy = ToySpec::from_json(j.at("toy"));
  d.manufacturer_images = j.value("manufacturer_images", d.manufacturer_images);
  d.customer_images = j.value("customer_images", d.customer_images);
  d.eval_images = j.value("eval_images", d.eval_images);
  d.voc_root = j.value("voc_root", std::string{});
  d.train_years = j.value("train_years", d.train_years);
  d.train_split = j.value("train_split", d.train_split);
  d.eval_years = j.value("eval_years", d.eval_years);
  d.eval_split = j.value("eval_split", d.eval_split);
  d.customer_fraction = j.value("customer_fraction", d.customer_fraction);
  d.image_size = j.value("image_size", d.image_size);
  if (j.contains("filter")) {
    d.filter.overlap_iou = j["filter"].value("overlap_iou", d.filter.overlap_iou);
    d.filter.strict_drop = j["filter"].value("strict_drop", d.filter.strict_drop);
  }
  if (d.manufacturer_images < 1 || d.customer_images < 1 || d.eval_images < 1) {
    throw ConfigError("data: image counts must be >= 1");
  }
  if (!(d.customer_fraction > 0.0 && d.customer_fraction < 1.0)) {
    throw ConfigError("data: customer_fraction must be in (0, 1)");
  }
  return d;
}

namespace {

nlohmann::json stages_to_json(const StageConfigs& s) {
  return {
      {"train_large", {{"train", s.train_large.to_json()}}},
      {"distill_A", {{"train", s.distill_a.to_json()}, {"fgd", s.fgd_a.to_json()}}},
      {"distill_B", {{"train", s.distill_b.to_json()}, {"fgd", s.fgd_b.to_json()}}},
      {"rd_emulation",
       {{"train", s.rd_emulation.to_json()},
        {"fgd", s.fgd_rd_emulation.to_json()},
        {"rd", s.rd_emulation_weights.to_json()},
        {"aliases", {"tutor 1", "ReDi B"}}}},
      {"rd_customer",
       {{"train", s.rd_customer.to_json()},
        {"fgd", s.fgd_rd_customer.to_json()},
        {"rd", s.rd_customer_weights.to_json()},
        {"aliases", {"tutor 2", "ReDi A"}}}},
      {"extract_delta", {{"parts", s.delta_parts}, {"gamma_delta", s.gamma_delta}}},
      {"apply_delta", {{"delta_update", s.delta_update}}},
      {"verify", {{"thresholds", s.thresholds.to_json()}}},
      {"distill_C", {{"train", s.distill_c.to_json()}, {"fgd", s.fgd_c.to_json()}}},
      {"evaluate_all", {{"eval", s.eval.to_json()}}},
      {"baseline_direct", {{"train", s.baseline_direct.to_json()}}},
  };
}

StageConfigs stages_from_json(const nlohmann::json& j, const StageConfigs& d) {
  StageConfigs s = d;
  auto sub = [&](const char* stage, const char* key) -> const nlohmann::json* {
    if (!j.contains(stage) || !j.at(stage).contains(key)) return nullptr;
    return &j.at(stage).at(key);
  };
  if (auto* p = sub("train_large", "train")) s.train_large = TrainConfig::from_json(*p, d.train_large);
  if (auto* p = sub("distill_A", "train")) s.distill_a = TrainConfig::from_json(*p, d.distill_a);
  if (auto* p = sub("distill_A", "fgd")) s.fgd_a = FGDConfig::from_json(*p, d.fgd_a);
  if (auto* p = sub("distill_B", "train")) s.distill_b = TrainConfig::from_json(*p, d.distill_b);
  if (auto* p = sub("distill_B", "fgd")) s.fgd_b = FGDConfig::from_json(*p, d.fgd_b);
  if (auto* p = sub("rd_emulation", "train")) s.rd_emulation = TrainConfig::from_json(*p, d.rd_emulation);
  if (auto* p = sub("rd_emulation", "fgd")) s.fgd_rd_emulation = FGDConfig::from_json(*p, d.fgd_rd_emulation);
  if (auto* p = sub("rd_emulation", "rd")) s.rd_emulation_weights = RDConfig::from_json(*p, d.rd_emulation_weights);
  if (auto* p = sub("rd_customer", "train")) s.rd_customer = TrainConfig::from_json(*p, d.rd_customer);
  if (auto* p = sub("rd_customer", "fgd")) s.fgd_rd_customer = FGDConfig::from_json(*p, d.fgd_rd_customer);
  if (auto* p = sub("rd_customer", "rd")) s.rd_customer_weights = RDConfig::from_json(*p, d.rd_customer_weights);
  if (auto* p = sub("extract_delta", "parts")) s.delta_parts = p->get<std::vector<std::string>>();
  if (auto* p = sub("extract_delta", "gamma_delta")) s.gamma_delta = p->get<double>();
  if (auto* p = sub("apply_delta", "delta_update")) s.delta_update = p->get<double>();
  if (auto* p = sub("verify", "thresholds")) s.thresholds = VerificationThresholds::from_json(*p);
  if (auto* p = sub("distill_C", "train")) s.distill_c = TrainConfig::from_json(*p, d.distill_c);
  if (auto* p = sub("distill_C", "fgd")) s.fgd_c = FGDConfig::from_json(*p, d.fgd_c);
  if (auto* p = sub("evaluate_all", "eval")) s.eval = EvalConfig::from_json(*p);
  if (auto* p = sub("baseline_direct", "train")) s.baseline_direct = TrainConfig::from_json(*p, d.baseline_direct);
  for (const auto& [key, value] : j.items()) {
    if (std::find(stage_names().begin(), stage_names().end(), key) == stage_names().end()) {
      throw ConfigError("plan: unknown stage '" + key + "'");
    }
  }
  return s;
}

TrainConfig make_train(double lr, int epochs, int batch) {
  TrainConfig t;
  t.learning_rate = lr;
  t.max_epochs = epochs;
  t.batch_size = batch;
  return t;
}

// Reference hyper-parameters: lr 1e-3 for tutor-tier students, 1e-2 for the
// edge tier, 100 epochs, batch 16; fine-tuning lr 1e-4, 20 epochs, batch 8,
// temperature 1.5.
StageConfigs reference_stage_configs() {
  StageConfigs s;
  s.train_large = make_train(1e-3, 100, 16);
  s.distill_a = make_train(1e-3, 100, 16);
  s.distill_b = make_train(1e-2, 100, 16);
  s.rd_emulation = make_train(1e-3, 100, 16);
  s.rd_customer = make_train(1e-3, 100, 16);
  s.distill_c = make_train(1e-4, 20, 8);
  s.fgd_c.temperature = 1.5;
  s.baseline_direct = make_train(1e-4, 20, 8);
  return s;
}

// Plan model entries are templates: each stage fills in its own categories.
DetectorConfig model_template_from_json(const nlohmann::json& j) {
  nlohmann::json filled = j;
  const bool templated = !j.contains("categories") || j.at("categories").empty();
  if (templated) filled["num_classes"] = 1;
  DetectorConfig c = DetectorConfig::from_json(filled);
  if (templated) {
    c.categories.clear();
    c.num_classes = 0;
  }
  return c;
}

// Desk-scale schedule: 20 epochs for from-scratch stages, 10 for stages that
// start from a trained model. Learning rates are raised because the toy
// models start far from convergence in very few steps.
StageConfigs toy_stage_configs() {
  StageConfigs s;
  s.train_large = make_train(0.02, 20, 16);
  s.distill_a = make_train(0.02, 20, 16);
  s.distill_b = make_train(0.02, 20, 16);
  s.rd_emulation = make_train(0.005, 10, 16);
  s.rd_customer = make_train(0.005, 10, 16);
  s.distill_c = make_train(0.005, 10, 8);
  s.baseline_direct = make_train(0.005, 10, 8);
  for (TrainConfig* t : {&s.train_large, &s.distill_a, &s.distill_b}) t->warmup_steps = 50;
  s.fgd_c.temperature = 1.5;
  return s;
}

}  // namespace

void ExperimentPlan::validate() const {
  if (plan_id.empty()) throw ConfigError("plan: empty plan_id");
  categories.validate();
  if (categories.teacher_categories.empty()) throw ConfigError("plan: no teacher categories");
  if (categories.presumed_categories.empty()) throw ConfigError("plan: no presumed categories");
  for (const char* tier : {"large", "tutor", "edge"}) {
    if (!models.contains(tier)) throw ConfigError(std::string("plan: missing model config '") + tier + "'");
  }
  const auto& large = models.at("large");
  const auto& tutor = models.at("tutor");
  const auto& edge = models.at("edge");
  if (large.strides != tutor.strides || tutor.strides != edge.strides) {
    throw ConfigError("plan: all tiers must share pyramid strides");
  }
  if (data.source == "toy") {
    for (const auto& c : categories.teacher_categories) {
      if (std::find(toy_shape_classes().begin(), toy_shape_classes().end(), c) == toy_shape_classes().end()) {
        throw ConfigError("plan: '" + c + "' is not a toy shape class");
      }
    }
  }
  if (!std::isfinite(stages.gamma_delta) || !std::isfinite(stages.delta_update)) {
    throw ConfigError("plan: gamma_delta and delta_update must be finite");
  }
}

nlohmann::json ExperimentPlan::to_json() const {
  nlohmann::json m = nlohmann::json::object();
  for (const auto& [tier, cfg] : models) m[tier] = cfg.to_json();
  return {{"format_version", kPlanFormatVersion},
          {"plan_id", plan_id},
          {"seed", seed},
          {"output_dir", output_dir.string()},
          {"data", data.to_json()},
          {"categories", categories.to_json()},
          {"models", m},
          {"stages", stages_to_json(stages)},
          {"inject_noise_delta", inject_noise_delta}};
}

ExperimentPlan ExperimentPlan::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("plan: not a JSON object");
  if (j.value("format_version", 0) != kPlanFormatVersion) {
    throw ConfigError("plan: format_version must be " + std::to_string(kPlanFormatVersion));
  }
  try {
    // A plan may extend a preset and override parts of it.
    ExperimentPlan p = j.contains("preset") ? preset(j.at("preset").get<std::string>()) : preset("toy-exp1");
    p.plan_id = j.value("plan_id", p.plan_id);
    p.seed = j.value("seed", p.seed);
    p.output_dir = j.value("output_dir", p.output_dir.string());
    if (j.contains("data")) p.data = DataSourceConfig::from_json(j.at("data"));
    if (j.contains("categories")) p.categories = CategoryPlan::from_json(j.at("categories"));
    if (j.contains("models")) {
      for (const auto& [tier, cfg] : j.at("models").items()) p.models[tier] = model_template_from_json(cfg);
    }
    if (j.contains("stages")) p.stages = stages_from_json(j.at("stages"), p.stages);
    p.inject_noise_delta = j.value("inject_noise_delta", p.inject_noise_delta);
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("plan: ") + e.what());
  }
}

std::vector<std::string> ExperimentPlan::preset_names() { return {"toy-exp1", "toy-exp2", "voc-exp1", "voc-exp2"}; }

ExperimentPlan ExperimentPlan::preset(const std::string& name) {
  ExperimentPlan p;
  p.plan_id = name;
  if (name == "toy-exp1" || name == "toy-exp2") {
    p.categories = name == "toy-exp1" ? CategoryPlan::toy_experiment1() : CategoryPlan::toy_experiment2();
    p.data.source = "toy";
    p.data.toy.classes = p.categories.teacher_categories;
    p.stages = toy_stage_configs();
    for (auto tier : {Tier::large, Tier::tutor, Tier::edge}) p.models[to_string(tier)] = DetectorConfig::preset(tier, {});
  } else if (name == "voc-exp1" || name == "voc-exp2") {
    p.categories = name == "voc-exp1" ? CategoryPlan::voc_experiment1() : CategoryPlan::voc_experiment2();
    p.data.source = "voc";
    p.data.image_size = 320;
    p.stages = reference_stage_configs();
    for (auto tier : {Tier::large, Tier::tutor, Tier::edge}) {
      auto cfg = DetectorConfig::preset(tier, {});
      cfg.scale_bounds = {0.f, 64.f, 128.f, std::numeric_limits<float>::infinity()};
      p.models[to_string(tier)] = cfg;
    }
    for (TrainConfig* t : {&p.stages.train_large, &p.stages.distill_a, &p.stages.distill_b, &p.stages.rd_emulation,
                           &p.stages.rd_customer, &p.stages.distill_c, &p.stages.baseline_direct}) {
      t->image_size = 320;
    }
    p.stages.eval.image_size = 320;
  } else {
    throw ConfigError("unknown plan preset '" + name + "'");
  }
  // Forgetting a category is the customer's request; the manufacturer
  // accepts that regression explicitly and still sees it flagged.
  for (const auto& c : p.categories.removed_categories) p.stages.thresholds.accepted_regressions.insert(c);
  return p;
}

ExperimentPlan load_plan(const fs::path& path) {
  if (!fs::exists(path)) {
    // A bare preset name is accepted in place of a file.
    const auto names = ExperimentPlan::preset_names();
    if (std::find(names.begin(), names.end(), path.string()) != names.end()) return ExperimentPlan::preset(path.string());
    throw ConfigError("plan file not found: " + path.string());
  }
  nlohmann::json j;
  try {
    j = read_json(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return ExperimentPlan::from_json(j);
}

void save_plan(const ExperimentPlan& plan, const fs::path& path) { write_json(path, plan.to_json()); }

// ---------------------------------------------------------------- manifest

StageRecord* RunManifest::find(const std::string& name) {
  for (auto& s : stages) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

const StageRecord* RunManifest::find(const std::string& name) const {
  for (const auto& s : stages) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

namespace {

nlohmann::json refs_to_json(const std::map<std::string, ArtifactRef>& refs) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, r] : refs) j[k] = {{"path", r.path}, {"digest", r.digest}};
  return j;
}

std::map<std::string, ArtifactRef> refs_from_json(const nlohmann::json& j) {
  std::map<std::string, ArtifactRef> out;
  for (const auto& [k, r] : j.items()) out[k] = {r.at("path").get<std::string>(), r.at("digest").get<std::string>()};
  return out;
}

}  // namespace

nlohmann::json RunManifest::to_json() const {
  nlohmann::json st = nlohmann::json::array();
  for (const auto& s : stages) {
    st.push_back({{"name", s.name},
                  {"status", s.status},
                  {"config_digest", s.config_digest},
                  {"inputs", refs_to_json(s.inputs)},
                  {"outputs", refs_to_json(s.outputs)},
                  {"wall_clock_seconds", s.wall_clock_seconds},
                  {"eval_snapshots", s.eval_snapshots},
                  {"message", s.message},
                  {"reused", s.reused}});
  }
  return {{"format_version", kPlanFormatVersion},
          {"plan_id", plan_id},
          {"run_dir", run_dir.string()},
          {"status", status},
          {"stages", st}};
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
  RunManifest m;
  try {
    m.plan_id = j.at("plan_id").get<std::string>();
    m.run_dir = j.value("run_dir", std::string{});
    m.status = j.value("status", "running");
    for (const auto& s : j.at("stages")) {
      StageRecord r;
      r.name = s.at("name").get<std::string>();
      r.status = s.at("status").get<std::string>();
      r.config_digest = s.value("config_digest", "");
      r.inputs = refs_from_json(s.value("inputs", nlohmann::json::object()));
      r.outputs = refs_from_json(s.value("outputs", nlohmann::json::object()));
      r.wall_clock_seconds = s.value("wall_clock_seconds", 0.0);
      r.eval_snapshots = s.value("eval_snapshots", nlohmann::json::array());
      r.message = s.value("message", "");
      r.reused = s.value("reused", false);
      m.stages.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("run manifest: ") + e.what());
  }
  return m;
}

fs::path default_output_root() {
  if (const char* env = std::getenv("DIREDI_OUT_ROOT"); env && *env) return env;
  return "runs";
}

fs::path resolve_run_dir(const ExperimentPlan& plan, const RunOptions& options) {
  if (options.output_dir) return *options.output_dir;
  if (!plan.output_dir.empty()) return plan.output_dir;
  return default_output_root() / plan.plan_id;
}

std::vector<std::string> verify_manifest(const RunManifest& manifest) {
  std::vector<std::string> bad;
  for (const auto& s : manifest.stages) {
    if (s.status != "complete") continue;
    for (const auto& [key, ref] : s.outputs) {
      const fs::path p = manifest.run_dir / ref.path;
      if (!fs::exists(p) || file_digest(p) != ref.digest) bad.push_back(ref.path);
    }
  }
  return bad;
}

// ---------------------------------------------------------------- runner

namespace {

constexpr const char* kManifestFile = "manifest.json";

std::string model_path(const std::string& key) { return "models/" + key + ".ckpt"; }
std::string eval_report_path(const std::string& key) { return "reports/eval/" + key + ".json"; }
std::string data_path(const std::string& pool) { return "data/" + pool + "/annotations.json"; }

std::vector<std::string> with_categories_of(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::string> out = a;
  for (const auto& c : b) {
    if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
  }
  return out;
}

DetectorConfig model_config(const ExperimentPlan& plan, const std::string& tier, std::vector<std::string> cats) {
  DetectorConfig c = plan.models.at(tier);
  c.num_classes = static_cast<int>(cats.size());
  c.categories = std::move(cats);
  return c;
}

// Stage-specific seed derived from the plan seed.
std::uint64_t stage_seed(const ExperimentPlan& plan, const std::string& stage) {
  Sha256 h;
  h.update_u64(plan.seed).update(stage);
  const auto d = h.finish();
  std::uint64_t s = 0;
  for (int i = 0; i < 8; ++i) s |= static_cast<std::uint64_t>(d[i]) << (8 * i);
  return s >> 1;
}

TrainConfig seeded(TrainConfig t, const ExperimentPlan& plan, const std::string& stage) {
  t.seed += stage_seed(plan, stage);
  return t;
}

class Runner {
 public:
  Runner(const ExperimentPlan& plan, const RunOptions& options)
      : plan_(plan), options_(options), dir_(resolve_run_dir(plan, options)) {
    if (options.seed) plan_.seed = *options.seed;
    plan_.inject_noise_delta = plan_.inject_noise_delta || options.inject_noise_delta;
    plan_.validate();
  }

  RunManifest run() {
    fs::create_directories(dir_);
    if (options_.resume && fs::exists(dir_ / kManifestFile)) {
      previous_ = RunManifest::from_json(read_json(dir_ / kManifestFile));
    }
    manifest_.plan_id = plan_.plan_id;
    manifest_.run_dir = dir_;
    save_plan(plan_, dir_ / "plan.json");

    try {
      prepare_data();
      train_large();
      distill_a();
      distill_b();
      rd_emulation();
      rd_customer();
      extract_delta();
      apply_delta();
      const bool gate_ok = verify();
      if (gate_ok) {
        distill_c();
        evaluate_all();
        baseline_direct();
        report();
        manifest_.status = "complete";
      } else {
        for (const char* name : {"distill_C", "evaluate_all", "baseline_direct", "report"}) skip(name, "verification gate failed");
        remove_downstream_artifacts();
        manifest_.status = "gate_failed";
      }
    } catch (...) {
      manifest_.status = "failed";
      save_manifest();
      throw;
    }
    save_manifest();
    return manifest_;
  }

 private:
  using Inputs = std::vector<std::pair<std::string, std::string>>;  // key, relative path

  // Runs `body` unless a previous run completed this stage with the same
  // digest and intact outputs. `body` returns the outputs it wrote.
  void stage(const std::string& name, const nlohmann::json& config, const Inputs& inputs,
             const std::function<std::vector<std::pair<std::string, std::string>>(StageRecord&)>& body) {
    StageRecord rec;
    rec.name = name;
    Sha256 h;
    h.update(name).update(config.dump()).update_u64(plan_.seed);
    for (const auto& [key, rel] : inputs) {
      const fs::path p = dir_ / rel;
      if (!fs::exists(p)) throw IoError("stage " + name + ": missing input '" + rel + "'");
      ArtifactRef ref{rel, file_digest(p)};
      h.update(key).update(ref.digest);
      rec.inputs[key] = ref;
    }
    rec.config_digest = to_hex(h.finish());

    if (previous_) {
      const StageRecord* old = previous_->find(name);
      if (old && old->status == "complete" && old->config_digest == rec.config_digest && outputs_intact(*old)) {
        StageRecord reused = *old;
        reused.reused = true;
        log_info("stage " + name + ": up to date, skipped");
        manifest_.stages.push_back(std::move(reused));
        save_manifest();
        return;
      }
    }
    log_info("stage " + name + ": running");
    const auto t0 = std::chrono::steady_clock::now();
    try {
      for (const auto& [key, rel] : body(rec)) rec.outputs[key] = {rel, file_digest(dir_ / rel)};
    } catch (const std::exception& e) {
      rec.status = "failed";
      rec.message = e.what();
      rec.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      manifest_.stages.push_back(std::move(rec));
      throw;
    }
    rec.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (rec.status == "pending") rec.status = "complete";
    manifest_.stages.push_back(std::move(rec));
    save_manifest();
  }

  void skip(const std::string& name, const std::string& why) {
    StageRecord rec;
    rec.name = name;
    rec.status = "skipped";
    rec.message = why;
    manifest_.stages.push_back(std::move(rec));
  }

  bool outputs_intact(const StageRecord& rec) const {
    for (const auto& [key, ref] : rec.outputs) {
      const fs::path p = dir_ / ref.path;
      if (!fs::exists(p) || file_digest(p) != ref.digest) return false;
    }
    return true;
  }

  void save_manifest() const { write_json(dir_ / kManifestFile, manifest_.to_json()); }

  void remove_downstream_artifacts() {
    for (const auto& rel : {model_path("edge_distill_c"), model_path("edge_direct"), std::string("records/distill_C.json"),
                            std::string("records/baseline_direct.json")}) {
      fs::remove(dir_ / rel);
    }
    fs::remove_all(dir_ / "reports/eval");
    fs::remove_all(dir_ / "reports/comparison");
  }

  // ---- data

  const DetectionDataset& pool(const std::string& name) {
    auto it = pools_.find(name);
    if (it == pools_.end()) it = pools_.emplace(name, load_dataset(dir_ / "data" / name)).first;
    return it->second;
  }

  void prepare_data() {
    nlohmann::json cfg = {{"data", plan_.data.to_json()}, {"teacher_categories", plan_.categories.teacher_categories}};
    stage("prepare_data", cfg, {}, [&](StageRecord&) {
      pools_.clear();
      std::map<std::string, DetectionDataset> made;
      if (plan_.data.source == "toy") {
        const std::vector<std::pair<std::string, int>> sizes{{"manufacturer", plan_.data.manufacturer_images},
                                                             {"customer", plan_.data.customer_images},
                                                             {"eval", plan_.data.eval_images}};
        for (const auto& [name, n] : sizes) {
          ToySpec spec = plan_.data.toy;
          spec.classes = plan_.categories.teacher_categories;
          spec.num_images = n;
          spec.seed = stage_seed(plan_, "data/" + name);
          spec.id_prefix = name;
          made[name] = generate_toy_dataset(spec);
        }
      } else {
        auto train = load_voc(plan_.data.voc_root, plan_.data.train_years, plan_.data.train_split,
                              plan_.categories.teacher_categories);
        DetectionDataset mfr, cust;
        mfr.category_names = cust.category_names = train.category_names;
        mfr.provenance = cust.provenance = train.provenance;
        // Deterministic split of the train pool by image id.
        for (auto& item : train.items) {
          const auto d = sha256(std::span(reinterpret_cast<const std::byte*>(item.image_id.data()), item.image_id.size()));
          const double u = static_cast<double>(d[0] | (d[1] << 8)) / 65536.0;
          (u < plan_.data.customer_fraction ? cust : mfr).items.push_back(std::move(item));
        }
        made["manufacturer"] = std::move(mfr);
        made["customer"] = std::move(cust);
        made["eval"] = load_voc(plan_.data.voc_root, plan_.data.eval_years, plan_.data.eval_split,
                                plan_.categories.teacher_categories);
      }
      std::vector<std::pair<std::string, std::string>> out;
      for (auto& [name, ds] : made) {
        save_dataset(ds, dir_ / "data" / name);
        out.emplace_back(name, data_path(name));
      }
      return out;
    });
  }

  DetectionDataset split(const std::string& pool_name, SplitMode mode) {
    return split_by_plan(pool(pool_name), plan_.categories, mode, plan_.data.filter);
  }

  DetectionDataset eval_set(const std::vector<std::string>& categories) {
    return filter_categories(pool("eval"), {categories.begin(), categories.end()}, plan_.data.filter);
  }

  std::vector<std::string> plan_cats(SplitMode mode) const { return plan_categories(plan_.categories, mode); }

  // ---- helpers

  Detector load_model(const std::string& key) { return load_checkpoint(dir_ / model_path(key)); }

  void save_model(const Detector& d, const std::string& key) { save_checkpoint(d, dir_ / model_path(key)); }

  void save_record(const TrainRecord& rec, const std::string& stage_name, StageRecord& sr) {
    write_json(dir_ / ("records/" + stage_name + ".json"), rec.to_json());
    sr.eval_snapshots = rec.to_json().at("eval_snapshots");
  }

  void append_provenance(Detector& d, const std::string& stage_name, const TrainRecord* rec) {
    nlohmann::json entry = {{"stage", stage_name}};
    if (rec) {
      entry["config_digest"] = rec->config_digest;
      entry["dataset_digest"] = rec->dataset_digest;
    }
    d->provenance().push_back(entry);
  }

  // ---- stages

  void train_large() {
    const auto cfg = seeded(plan_.stages.train_large, plan_, "train_large");
    nlohmann::json c = {{"model", plan_.models.at("large").to_json()}, {"train", cfg.to_json()},
                        {"categories", plan_.categories.teacher_categories}};
    stage("train_large", c, {{"data", data_path("manufacturer")}}, [&](StageRecord& sr) {
      const auto& cats = plan_.categories.teacher_categories;
      auto data = filter_categories(pool("manufacturer"), {cats.begin(), cats.end()}, plan_.data.filter);
      auto model = build_detector(model_config(plan_, "large", cats), stage_seed(plan_, "init/large"));
      const auto ev = eval_set(cats);
      SnapshotOptions snaps{&ev, plan_.stages.eval, cats};
      auto [trained, rec] = train_direct(model, data, cfg, snaps);
      rec.procedure = "train";
      append_provenance(trained, "train_large", &rec);
      save_model(trained, "large");
      save_record(rec, "train_large", sr);
      return std::vector<std::pair<std::string, std::string>>{{"model", model_path("large")},
                                                              {"record", "records/train_large.json"}};
    });
  }

  void forward_distill(const std::string& name, const std::string& teacher_key, const std::string& tier,
                       const std::string& out_key, const TrainConfig& train_cfg, const FGDConfig& fgd) {
    const auto cfg = seeded(train_cfg, plan_, name);
    const auto cats = plan_cats(SplitMode::verification);
    nlohmann::json c = {{"model", plan_.models.at(tier).to_json()}, {"train", cfg.to_json()},
                        {"fgd", fgd.to_json()}, {"categories", cats}};
    stage(name, c, {{"teacher", model_path(teacher_key)}, {"data", data_path("manufacturer")}},
          [&](StageRecord& sr) {
            auto teacher = load_model(teacher_key);
            auto data = split("manufacturer", SplitMode::verification);
            auto student = build_detector(model_config(plan_, tier, cats), stage_seed(plan_, "init/" + tier));
            const auto ev = eval_set(cats);
            SnapshotOptions snaps{&ev, plan_.stages.eval, cats};
            auto [trained, rec] = distill(teacher, student, data, fgd, cfg, snaps);
            append_provenance(trained, name, &rec);
            trained->provenance().back()["presumed_dataset_fingerprint"] = rec.dataset_digest;
            save_model(trained, out_key);
            save_record(rec, name, sr);
            return std::vector<std::pair<std::string, std::string>>{{"model", model_path(out_key)},
                                                                    {"record", "records/" + name + ".json"}};
          });
  }

  void distill_a() { forward_distill("distill_A", "large", "tutor", "tutor", plan_.stages.distill_a, plan_.stages.fgd_a); }
  void distill_b() { forward_distill("distill_B", "tutor", "edge", "edge", plan_.stages.distill_b, plan_.stages.fgd_b); }

  void reverse(const std::string& name, SplitMode mode, const std::string& out_key, const TrainConfig& train_cfg,
               const FGDConfig& fgd, const RDConfig& rd) {
    const auto cfg = seeded(train_cfg, plan_, name);
    const auto data_cats = plan_cats(mode);
    nlohmann::json c = {{"train", cfg.to_json()}, {"fgd", fgd.to_json()}, {"rd", rd.to_json()},
                        {"mode", to_string(mode)}};
    stage(name, c,
          {{"teacher", model_path("edge")}, {"tutor", model_path("tutor")}, {"data", data_path("customer")}},
          [&](StageRecord& sr) {
            auto edge = load_model("edge");
            auto tutor = load_model("tutor");
            // The emulation tutor keeps the original class plan; the customer
            // tutor is re-shaped to the customer's plan.
            Detector init = mode == SplitMode::customer_actual
                                ? with_categories(tutor, data_cats, stage_seed(plan_, "init/" + name))
                                : tutor;
            auto data = split("customer", mode);
            const auto& cats = init->config().categories;
            const auto ev = eval_set(with_categories_of(cats, data_cats));
            SnapshotOptions snaps{&ev, plan_.stages.eval, with_categories_of(cats, data_cats)};
            auto [trained, rec] = reverse_distill(edge, init, data, fgd, rd, cfg, snaps);
            append_provenance(trained, name, &rec);
            save_model(trained, out_key);
            save_record(rec, name, sr);
            return std::vector<std::pair<std::string, std::string>>{{"model", model_path(out_key)},
                                                                    {"record", "records/" + name + ".json"}};
          });
  }

  void rd_emulation() {
    reverse("rd_emulation", SplitMode::presumed, "tutor1", plan_.stages.rd_emulation, plan_.stages.fgd_rd_emulation,
            plan_.stages.rd_emulation_weights);
  }
  void rd_customer() {
    reverse("rd_customer", SplitMode::customer_actual, "tutor2", plan_.stages.rd_customer,
            plan_.stages.fgd_rd_customer, plan_.stages.rd_customer_weights);
  }

  void extract_delta() {
    nlohmann::json c = {{"parts", plan_.stages.delta_parts}, {"gamma_delta", plan_.stages.gamma_delta}};
    stage("extract_delta", c,
          {{"tutor1", model_path("tutor1")}, {"tutor2", model_path("tutor2")}, {"tutor", model_path("tutor")}},
          [&](StageRecord&) {
            auto t1 = load_model("tutor1");
            auto t2 = load_model("tutor2");
            auto original = load_model("tutor");
            const auto plan = with_categories_of(t1->config().categories, t2->config().categories);
            auto a1 = align_to_categories(t1, plan);
            auto a2 = align_to_categories(t2, plan);
            const std::set<Part> parts = [&] {
              std::set<Part> p;
              for (const auto& n : plan_.stages.delta_parts) p.insert(part_from_string(n));
              return p;
            }();
            KnowledgePacket packet;
            packet.delta = compute_delta(extract_weights(a1, parts), extract_weights(a2, parts), plan_.stages.gamma_delta);
            // Only the manufacturer's own category names are shared.
            const std::set<std::string> shareable(plan_.categories.presumed_categories.begin(),
                                                  plan_.categories.presumed_categories.end());
            std::map<std::string, std::string> aliases;
            auto& m = packet.manifest;
            m.class_plan = anonymize_categories(plan, shareable, aliases);
            m.emulation_plan = anonymize_categories(t1->config().categories, shareable, aliases);
            m.customer_plan = anonymize_categories(t2->config().categories, shareable, aliases);
            m.architecture_digest = architecture_digest(packet.delta);
            m.gamma_delta = plan_.stages.gamma_delta;
            m.created = packet_timestamp();
            for (const auto& p : original->provenance()) {
              if (p.contains("presumed_dataset_fingerprint")) {
                m.presumed_dataset_fingerprint = p["presumed_dataset_fingerprint"].get<std::string>();
              }
            }
            serialize_packet(packet, dir_ / "packet/knowledge.pkt");
            write_json(dir_ / "customer/customer_aliases.json", {{"aliases", aliases}});
            return std::vector<std::pair<std::string, std::string>>{{"packet", "packet/knowledge.pkt"},
                                                                    {"aliases", "customer/customer_aliases.json"}};
          });
  }

  void apply_delta() {
    nlohmann::json c = {{"delta_update", plan_.stages.delta_update}, {"inject_noise_delta", plan_.inject_noise_delta}};
    stage("apply_delta", c, {{"tutor", model_path("tutor")}, {"packet", "packet/knowledge.pkt"}}, [&](StageRecord& sr) {
      auto original = load_model("tutor");
      auto packet = deserialize_packet(dir_ / "packet/knowledge.pkt");
      WeightSet delta = packet.delta;
      if (plan_.inject_noise_delta) {
        delta = noise_like(delta, stage_seed(plan_, "noise"));
        sr.message = "noise-injected delta (norm " + std::to_string(delta.norm()) + ")";
        log_info("apply_delta: " + sr.message);
      }
      auto aligned = align_to_categories(original, packet.manifest.class_plan);
      auto updated = diredi::apply_delta(aligned, delta, plan_.stages.delta_update);
      append_provenance(updated, "apply_delta", nullptr);
      updated->provenance().back()["packet_created"] = packet.manifest.created;
      save_model(updated, "updated_tutor");
      return std::vector<std::pair<std::string, std::string>>{{"model", model_path("updated_tutor")}};
    });
  }

  bool verify() {
    nlohmann::json c = {{"thresholds", plan_.stages.thresholds.to_json()}, {"eval", plan_.stages.eval.to_json()}};
    bool passed = true;
    stage("verify", c,
          {{"original", model_path("tutor")}, {"updated", model_path("updated_tutor")}, {"data", data_path("eval")}},
          [&](StageRecord& sr) {
            auto original = load_model("tutor");
            auto updated = load_model("updated_tutor");
            auto data = split("eval", SplitMode::verification);
            auto report = verify_update(original, updated, data, plan_.stages.thresholds, plan_.stages.eval);
            write_json(dir_ / "reports/verify.json", report.to_json());
            if (!report.passed) {
              sr.status = "failed";
              std::string msg = "verification failed; regressed:";
              for (const auto& r : report.regressions()) msg += " " + r;
              sr.message = msg;
              log_info(msg);
            }
            return std::vector<std::pair<std::string, std::string>>{{"report", "reports/verify.json"}};
          });
    // A failed gate recorded by an earlier run stays failed.
    const StageRecord* rec = manifest_.find("verify");
    passed = rec && rec->status == "complete";
    if (rec && rec->reused) {
      passed = VerificationReport::from_json(read_json(dir_ / "reports/verify.json")).passed;
    }
    return passed;
  }

  Detector customer_view(const std::string& key) {
    // Restores private category names from the customer's alias file.
    auto model = load_model(key);
    const auto aliases = read_json(dir_ / "customer/customer_aliases.json").at("aliases");
    auto names = model->config().categories;
    for (auto& n : names) {
      if (aliases.contains(n)) n = aliases.at(n).get<std::string>();
    }
    return rename_categories(model, names);
  }

  void distill_c() {
    const auto cfg = seeded(plan_.stages.distill_c, plan_, "distill_C");
    const auto cats = plan_cats(SplitMode::customer_actual);
    nlohmann::json c = {{"train", cfg.to_json()}, {"fgd", plan_.stages.fgd_c.to_json()}, {"categories", cats}};
    stage("distill_C", c,
          {{"tutor", model_path("updated_tutor")},
           {"edge", model_path("edge")},
           {"aliases", "customer/customer_aliases.json"},
           {"data", data_path("customer")}},
          [&](StageRecord& sr) {
            auto tutor = customer_view("updated_tutor");
            auto edge = load_model("edge");
            auto data = split("customer", SplitMode::customer_actual);
            const auto ev = eval_set(cats);
            SnapshotOptions snaps{&ev, plan_.stages.eval, cats};
            auto [trained, rec] = redistill_finetune(tutor, edge, data, cats, plan_.stages.fgd_c, cfg,
                                                     stage_seed(plan_, "init/distill_C"), snaps);
            append_provenance(trained, "distill_C", &rec);
            save_model(trained, "edge_distill_c");
            save_record(rec, "distill_C", sr);
            return std::vector<std::pair<std::string, std::string>>{{"model", model_path("edge_distill_c")},
                                                                    {"record", "records/distill_C.json"}};
          });
  }

  void evaluate_model(Detector& model, const std::string& key) {
    const auto& cats = plan_.categories.eval_categories;
    const auto ev = eval_set(cats);
    auto report = evaluate(model, ev, plan_.stages.eval, cats);
    write_json(dir_ / eval_report_path(key), report.to_json());
  }

  void evaluate_all() {
    nlohmann::json c = {{"eval", plan_.stages.eval.to_json()}, {"categories", plan_.categories.eval_categories}};
    const std::vector<std::string> keys{"large", "tutor", "tutor1", "tutor2", "updated_tutor", "edge", "edge_distill_c"};
    Inputs inputs{{"data", data_path("eval")}, {"aliases", "customer/customer_aliases.json"}};
    for (const auto& k : keys) inputs.emplace_back(k, model_path(k));
    stage("evaluate_all", c, inputs, [&](StageRecord&) {
      std::vector<std::pair<std::string, std::string>> out;
      for (const auto& k : keys) {
        auto model = k == "updated_tutor" ? customer_view(k) : load_model(k);
        evaluate_model(model, k);
        out.emplace_back(k, eval_report_path(k));
      }
      return out;
    });
  }

  void baseline_direct() {
    const auto cfg = seeded(plan_.stages.baseline_direct, plan_, "baseline_direct");
    const auto cats = plan_cats(SplitMode::customer_actual);
    nlohmann::json c = {{"train", cfg.to_json()}, {"categories", cats}, {"eval", plan_.stages.eval.to_json()},
                        {"eval_categories", plan_.categories.eval_categories}};
    stage("baseline_direct", c,
          {{"edge", model_path("edge")}, {"data", data_path("customer")}, {"eval_data", data_path("eval")}},
          [&](StageRecord& sr) {
            auto edge = with_categories(load_model("edge"), cats, stage_seed(plan_, "init/distill_C"));
            auto data = split("customer", SplitMode::customer_actual);
            const auto ev = eval_set(cats);
            SnapshotOptions snaps{&ev, plan_.stages.eval, cats};
            auto [trained, rec] = train_direct(edge, data, cfg, snaps);
            append_provenance(trained, "baseline_direct", &rec);
            save_model(trained, "edge_direct");
            save_record(rec, "baseline_direct", sr);
            evaluate_model(trained, "edge_direct");
            return std::vector<std::pair<std::string, std::string>>{{"model", model_path("edge_direct")},
                                                                    {"record", "records/baseline_direct.json"},
                                                                    {"report", eval_report_path("edge_direct")}};
          });
  }

  void report() {
    Inputs inputs;
    for (const auto& row : comparison_model_rows()) inputs.emplace_back(row.key, eval_report_path(row.key));
    stage("report", {{"categories", plan_.categories.eval_categories}}, inputs, [&](StageRecord&) {
      write_comparison(load_comparison_rows(dir_), plan_.categories.eval_categories, dir_ / "reports/comparison");
      return std::vector<std::pair<std::string, std::string>>{
          {"table", "reports/comparison/comparison.txt"},
          {"json", "reports/comparison/comparison.json"},
          {"csv", "reports/comparison/ap.csv"},
          {"chart", "reports/comparison/ap_chart.png"}};
    });
  }

  ExperimentPlan plan_;
  RunOptions options_;
  fs::path dir_;
  RunManifest manifest_;
  std::optional<RunManifest> previous_;
  std::map<std::string, DetectionDataset> pools_;
};

}  // namespace

RunManifest run_plan(const ExperimentPlan& plan, const RunOptions& options) { return Runner(plan, options).run(); }

std::vector<ComparisonRow> load_comparison_rows(const fs::path& run_dir) {
  std::vector<ComparisonRow> rows;
  for (const auto& row : comparison_model_rows()) {
    const fs::path p = run_dir / eval_report_path(row.key);
    if (!fs::exists(p)) continue;
    rows.push_back({row.label, EvalReport::from_json(read_json(p))});
  }
  return rows;
}

void write_comparison(const std::vector<ComparisonRow>& rows, const std::vector<std::string>& categories,
                      const fs::path& dir) {
  fs::create_directories(dir);
  const std::string table = render_comparison_table(rows, categories);
  write_file_bytes(dir / "comparison.txt", std::span(reinterpret_cast<const std::byte*>(table.data()), table.size()));
  nlohmann::json j = {{"categories", categories}, {"rows", nlohmann::json::array()}};
  for (const auto& r : rows) j["rows"].push_back({{"model", r.label}, {"report", r.report.to_json()}});
  write_json(dir / "comparison.json", j);
  const std::string csv = render_ap_csv(rows, categories);
  write_file_bytes(dir / "ap.csv", std::span(reinterpret_cast<const std::byte*>(csv.data()), csv.size()));
  render_ap_chart(rows, categories, dir / "ap_chart.png");
}

void render_ap_chart(const std::vector<ComparisonRow>& rows, const std::vector<std::string>& categories,
                     const fs::path& png_path) {
  const int bar = 10, gap = 24, left = 50, top = 20, plot_h = 240, legend_h = 16 * static_cast<int>(rows.size()) + 10;
  const int group = std::max(1, static_cast<int>(rows.size())) * bar;
  const int width = left + static_cast<int>(categories.size()) * (group + gap) + gap;
  const int height = top + plot_h + 40 + legend_h;
  cv::Mat img(height, std::max(width, 360), CV_8UC3, cv::Scalar(255, 255, 255));
  const int base = top + plot_h;
  for (int t = 0; t <= 4; ++t) {
    const int y = base - plot_h * t / 4;
    cv::line(img, {left, y}, {img.cols - 5, y}, cv::Scalar(220, 220, 220), 1);
    cv::putText(img, std::to_string(25 * t), {5, y + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.35, cv::Scalar(0, 0, 0), 1);
  }
  auto colour = [](std::size_t i) {
    static const cv::Scalar kPalette[] = {{180, 119, 31}, {14, 127, 255}, {44, 160, 44}, {40, 39, 214},
                                          {189, 103, 148}, {75, 86, 140}, {194, 119, 227}, {127, 127, 127}};
    return kPalette[i % std::size(kPalette)];
  };
  for (std::size_t c = 0; c < categories.size(); ++c) {
    const int x0 = left + gap + static_cast<int>(c) * (group + gap);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const double ap = rows[r].report.ap(categories[c]);
      const int h = static_cast<int>(std::lround(ap * plot_h));
      const int x = x0 + static_cast<int>(r) * bar;
      cv::rectangle(img, {x, base - h}, {x + bar - 2, base}, colour(r), cv::FILLED);
    }
    cv::putText(img, categories[c].substr(0, 8), {x0, base + 14}, cv::FONT_HERSHEY_SIMPLEX, 0.35,
                cv::Scalar(0, 0, 0), 1);
  }
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const int y = base + 40 + 16 * static_cast<int>(r);
    cv::rectangle(img, {left, y - 9}, {left + 10, y}, colour(r), cv::FILLED);
    cv::putText(img, rows[r].label, {left + 16, y}, cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0), 1);
  }
  std::vector<uchar> png;
  if (!cv::imencode(".png", img, png)) throw IoError("cannot encode AP chart");
  write_file_bytes(png_path, std::span(reinterpret_cast<const std::byte*>(png.data()), png.size()));
}

}  // namespace diredi
