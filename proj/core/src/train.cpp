#include "diredi/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <set>

#include "diredi/error.hpp"
#include "diredi/hash.hpp"
#include "diredi/log.hpp"
#include "diredi/targets.hpp"

namespace diredi {

// ---------------------------------------------------------------- configs

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("train: learning_rate must be > 0");
  if (max_epochs < 0) throw ConfigError("train: max_epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must be in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
  if (lr_schedule == LrSchedule::step && step_every < 1) throw ConfigError("train: step schedule needs step_every >= 1");
  if (warmup_steps < 0) throw ConfigError("train: warmup_steps must be >= 0");
  if (!(grad_clip_norm > 0.0)) throw ConfigError("train: grad_clip_norm must be > 0");
  if (image_size < 0 || eval_every < 0) throw ConfigError("train: image_size and eval_every must be >= 0");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate},
          {"max_epochs", max_epochs},
          {"batch_size", batch_size},
          {"seed", seed},
          {"optimizer", optimizer == OptimizerKind::sgd_momentum ? "sgd_momentum" : "adaptive"},
          {"momentum", momentum},
          {"weight_decay", weight_decay},
          {"lr_schedule", lr_schedule == LrSchedule::constant ? "constant" : "step"},
          {"step_every", step_every},
          {"step_factor", step_factor},
          {"warmup_steps", warmup_steps},
          {"grad_clip_norm", grad_clip_norm},
          {"hflip", hflip},
          {"image_size", image_size},
          {"freeze_backbone", freeze_backbone},
          {"eval_every", eval_every}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }

TrainConfig TrainConfig::from_json(const nlohmann::json& j, const TrainConfig& d) {
  TrainConfig c = d;
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    if (j.contains("optimizer")) {
      const auto o = j.at("optimizer").get<std::string>();
      if (o == "sgd_momentum") c.optimizer = OptimizerKind::sgd_momentum;
      else if (o == "adaptive") c.optimizer = OptimizerKind::adaptive;
      else throw ConfigError("train: unknown optimizer '" + o + "'");
    }
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    if (j.contains("lr_schedule")) {
      const auto s = j.at("lr_schedule").get<std::string>();
      if (s == "constant") c.lr_schedule = LrSchedule::constant;
      else if (s == "step") c.lr_schedule = LrSchedule::step;
      else throw ConfigError("train: unknown lr_schedule '" + s + "'");
    }
    c.step_every = j.value("step_every", c.step_every);
    c.step_factor = j.value("step_factor", c.step_factor);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.grad_clip_norm = j.value("grad_clip_norm", c.grad_clip_norm);
    c.hflip = j.value("hflip", c.hflip);
    c.image_size = j.value("image_size", c.image_size);
    c.freeze_backbone = j.value("freeze_backbone", c.freeze_backbone);
    c.eval_every = j.value("eval_every", c.eval_every);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string TrainConfig::digest() const { return sha256_hex(to_json().dump()); }

void RDConfig::validate() const {
  if (!(alpha_rd >= 0.0) || !(beta_rd >= 0.0)) throw ConfigError("reverse distillation: weights must be >= 0");
  if (alpha_rd == 0.0 && beta_rd == 0.0) throw ConfigError("reverse distillation: alpha and beta are both zero");
}

nlohmann::json RDConfig::to_json() const { return {{"alpha_rd", alpha_rd}, {"beta_rd", beta_rd}}; }

RDConfig RDConfig::from_json(const nlohmann::json& j) { return from_json(j, RDConfig{}); }

RDConfig RDConfig::from_json(const nlohmann::json& j, const RDConfig& d) {
  RDConfig c = d;
  c.alpha_rd = j.value("alpha_rd", c.alpha_rd);
  c.beta_rd = j.value("beta_rd", c.beta_rd);
  c.validate();
  return c;
}

// ---------------------------------------------------------------- records

nlohmann::json TrainRecord::to_json() const {
  nlohmann::json ep = nlohmann::json::array();
  for (const auto& e : epochs) {
    ep.push_back({{"epoch", e.epoch},
                  {"steps", e.steps},
                  {"learning_rate", e.learning_rate},
                  {"components", e.components},
                  {"total", e.total}});
  }
  nlohmann::json snaps = nlohmann::json::array();
  for (const auto& s : eval_snapshots) snaps.push_back({{"epoch", s.epoch}, {"map", s.map}, {"per_class_ap", s.per_class_ap}});
  return {{"procedure", procedure},
          {"config", config},
          {"config_digest", config_digest},
          {"dataset_digest", dataset_digest},
          {"epochs", ep},
          {"eval_snapshots", snaps},
          {"warnings", warnings},
          {"initial_parameter_digest", initial_parameter_digest},
          {"final_parameter_digest", final_parameter_digest},
          {"wall_clock_seconds", wall_clock_seconds}};
}

TrainRecord TrainRecord::from_json(const nlohmann::json& j) {
  TrainRecord r;
  try {
    r.procedure = j.at("procedure").get<std::string>();
    r.config = j.at("config");
    r.config_digest = j.at("config_digest").get<std::string>();
    r.dataset_digest = j.value("dataset_digest", "");
    for (const auto& e : j.at("epochs")) {
      EpochRecord er;
      er.epoch = e.at("epoch").get<int>();
      er.steps = e.at("steps").get<int>();
      er.learning_rate = e.at("learning_rate").get<double>();
      er.components = e.at("components").get<std::map<std::string, double>>();
      er.total = e.at("total").get<double>();
      r.epochs.push_back(er);
    }
    for (const auto& s : j.at("eval_snapshots")) {
      r.eval_snapshots.push_back({s.at("epoch").get<int>(), s.at("map").get<double>(),
                                  s.at("per_class_ap").get<std::map<std::string, double>>()});
    }
    r.warnings = j.value("warnings", std::vector<std::string>{});
    r.initial_parameter_digest = j.value("initial_parameter_digest", "");
    r.final_parameter_digest = j.value("final_parameter_digest", "");
    r.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("train record: ") + e.what());
  }
  return r;
}

// ---------------------------------------------------------------- loop

namespace {

using LossTerms = std::vector<std::pair<std::string, torch::Tensor>>;
using StepFn = std::function<LossTerms(const Batch&)>;

struct LoopSpec {
  std::string procedure;
  nlohmann::json config;  // full run configuration (digested)
  std::function<bool(const std::string&)> trainable = [](const std::string&) { return true; };
  std::vector<torch::Tensor> extra_parameters;  // auxiliary modules (GcBlocks, adaptors)
  bool drop_unknown_labels = false;
};

std::vector<std::pair<std::int64_t, std::int64_t>> level_shapes(const FeaturePyramid& p) {
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  for (const auto& l : p.levels) out.emplace_back(l.size(2), l.size(3));
  return out;
}

void add_detection_terms(LossTerms& terms, const ForwardResult& fr, const Batch& batch, const DetectorConfig& cfg,
                         double weight) {
  auto targets = assign_targets(batch.annotations, level_shapes(fr.pyramid), cfg.strides, cfg.scale_bounds);
  auto loss = detection_loss(fr.head, targets);
  terms.emplace_back("detect_cls", weight * loss.classification);
  terms.emplace_back("detect_box", weight * loss.box);
  terms.emplace_back("detect_ctr", weight * loss.centerness);
}

void add_feature_terms(LossTerms& terms, const FeaturePyramid& teacher, const FeaturePyramid& student,
                       const Batch& batch, const FGDConfig& fgd, FeatureDistiller& distiller, double weight) {
  auto fd = feature_distill_loss(teacher, student, batch.annotations, fgd, distiller);
  terms.emplace_back("fgd_fg", weight * fd.foreground);
  terms.emplace_back("fgd_bg", weight * fd.background);
  terms.emplace_back("fgd_attn", weight * fd.attention);
  terms.emplace_back("fgd_global", weight * fd.global);
}

EvalSnapshot snapshot(Detector& model, int epoch, const SnapshotOptions& opts) {
  EvalReport r = evaluate(model, *opts.dataset, opts.eval, opts.categories);
  EvalSnapshot s;
  s.epoch = epoch;
  s.map = r.map;
  for (const auto& [name, c] : r.classes) {
    if (c.ap) s.per_class_ap[name] = *c.ap;
  }
  return s;
}

double lr_at(const TrainConfig& cfg, int epoch, std::int64_t global_step) {
  double lr = cfg.learning_rate;
  if (cfg.lr_schedule == LrSchedule::step) lr *= std::pow(cfg.step_factor, (epoch - 1) / cfg.step_every);
  if (global_step < cfg.warmup_steps) {
    const double f = static_cast<double>(global_step) / static_cast<double>(cfg.warmup_steps);
    lr *= 0.1 + 0.9 * f;
  }
  return lr;
}

void set_lr(torch::optim::Optimizer& opt, double lr) {
  for (auto& group : opt.param_groups()) group.options().set_lr(lr);
}

std::set<std::string> model_category_set(const Detector& d) {
  return {d->config().categories.begin(), d->config().categories.end()};
}

void require_covers(const Detector& model, const DetectionDataset& dataset, const std::string& role) {
  const auto cats = model_category_set(model);
  std::vector<std::string> missing;
  for (const auto& c : dataset.labelled_categories()) {
    if (!cats.contains(c)) missing.push_back(c);
  }
  if (!missing.empty()) {
    std::string msg = role + " lacks dataset categories:";
    for (const auto& m : missing) msg += " " + m;
    throw ConfigError(msg);
  }
}

// Trains `student` in place.
TrainRecord run_loop(Detector& student, const DetectionDataset& dataset, const TrainConfig& cfg,
                     const LoopSpec& spec, const StepFn& step, const SnapshotOptions& snapshots) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  TrainRecord record;
  record.procedure = spec.procedure;
  record.config = spec.config;
  record.config_digest = sha256_hex(spec.config.dump());
  record.dataset_digest = dataset_fingerprint(dataset);
  record.initial_parameter_digest = parameter_digest(student);

  if (snapshots.dataset) record.eval_snapshots.push_back(snapshot(student, 0, snapshots));

  std::vector<torch::Tensor> params = spec.extra_parameters;
  std::vector<torch::Tensor> frozen;
  for (auto& item : student->named_parameters()) {
    const bool train = spec.trainable(item.key()) && !(cfg.freeze_backbone && part_of(item.key()) == Part::backbone);
    if (train) {
      params.push_back(item.value());
    } else if (item.value().requires_grad()) {
      item.value().set_requires_grad(false);
      frozen.push_back(item.value());
    }
  }

  std::unique_ptr<torch::optim::Optimizer> opt;
  if (cfg.optimizer == OptimizerKind::sgd_momentum) {
    opt = std::make_unique<torch::optim::SGD>(
        params, torch::optim::SGDOptions(cfg.learning_rate).momentum(cfg.momentum).weight_decay(cfg.weight_decay));
  } else {
    opt = std::make_unique<torch::optim::Adam>(
        params, torch::optim::AdamOptions(cfg.learning_rate).weight_decay(cfg.weight_decay));
  }

  const LabelMap labels(dataset.category_names, student->config().categories, spec.drop_unknown_labels);
  BatchOptions options;
  options.image_size = cfg.image_size;
  options.channels = student->config().in_channels;

  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::int64_t global_step = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    student->train();
    if (cfg.freeze_backbone) student->backbone()->eval();
    std::mt19937_64 rng(cfg.seed + static_cast<std::uint64_t>(epoch));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    EpochRecord er;
    er.epoch = epoch;
    er.learning_rate = lr_at(cfg, epoch, global_step);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      options.hflip = cfg.hflip && (rng() & 1U);
      Batch batch = make_batch(dataset, std::span(order).subspan(start, end - start), labels, options);

      LossTerms terms = step(batch);
      torch::Tensor total = terms.front().second;
      for (std::size_t k = 1; k < terms.size(); ++k) total = total + terms[k].second;
      if (!torch::isfinite(total).item<bool>()) {
        throw NumericError(spec.procedure + ": non-finite loss at epoch " + std::to_string(epoch));
      }
      set_lr(*opt, lr_at(cfg, epoch, global_step));
      opt->zero_grad();
      if (total.requires_grad()) {
        total.backward();
        torch::nn::utils::clip_grad_norm_(params, cfg.grad_clip_norm);
        opt->step();
      }
      for (const auto& [name, t] : terms) er.components[name] += t.item<double>();
      ++er.steps;
      ++global_step;
    }
    er.total = 0.0;
    for (const auto& [name, v] : er.components) er.total += v;
    log_debug(spec.procedure + " epoch " + std::to_string(epoch) + " loss " + std::to_string(er.total / std::max(1, er.steps)));
    record.epochs.push_back(std::move(er));

    const bool last = epoch == cfg.max_epochs;
    if (snapshots.dataset && (last || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0))) {
      record.eval_snapshots.push_back(snapshot(student, epoch, snapshots));
    }
  }

  for (auto& t : frozen) t.set_requires_grad(true);
  student->eval();
  record.final_parameter_digest = parameter_digest(student);
  record.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return record;
}

void check_teacher_unchanged(const Detector& teacher, const std::string& before, const std::string& procedure) {
  if (parameter_digest(teacher) != before) {
    throw NumericError(procedure + ": teacher parameters changed during training");
  }
}

nlohmann::json base_config(const TrainConfig& cfg) { return {{"train", cfg.to_json()}}; }

}  // namespace

std::pair<Detector, TrainRecord> train_direct(const Detector& model, const DetectionDataset& dataset,
                                              const TrainConfig& config, const SnapshotOptions& snapshots) {
  require_covers(model, dataset, "model");
  torch::manual_seed(config.seed);
  Detector student = clone_detector(model);
  LoopSpec spec;
  spec.procedure = "train_direct";
  spec.config = base_config(config);
  const auto& dcfg = student->config();
  auto step = [&](const Batch& batch) {
    LossTerms terms;
    add_detection_terms(terms, student->forward(batch.images), batch, dcfg, 1.0);
    return terms;
  };
  TrainRecord rec = run_loop(student, dataset, config, spec, step, snapshots);
  return {student, std::move(rec)};
}

std::pair<Detector, TrainRecord> distill(const Detector& teacher, const Detector& student_init,
                                         const DetectionDataset& dataset, const FGDConfig& fgd,
                                         const TrainConfig& config, const SnapshotOptions& snapshots) {
  fgd.validate();
  require_covers(student_init, dataset, "student");
  require_covers(teacher, dataset, "teacher");
  if (teacher->config().strides != student_init->config().strides) {
    throw ConfigError("distill: teacher and student pyramids use different strides");
  }
  Detector t = teacher;
  t->eval();
  const std::string teacher_digest = parameter_digest(t);

  torch::manual_seed(config.seed);
  Detector student = clone_detector(student_init);
  FeatureDistiller distiller(student->config().strides.size(), t->config().neck_channels,
                             student->config().neck_channels);
  LoopSpec spec;
  spec.procedure = "distill";
  spec.config = base_config(config);
  spec.config["fgd"] = fgd.to_json();
  spec.extra_parameters = distiller->parameters();
  const auto& dcfg = student->config();
  auto step = [&](const Batch& batch) {
    FeaturePyramid tp;
    {
      torch::NoGradGuard guard;
      tp = t->features(batch.images);
    }
    auto fr = student->forward(batch.images);
    LossTerms terms;
    add_detection_terms(terms, fr, batch, dcfg, 1.0);
    add_feature_terms(terms, tp, fr.pyramid, batch, fgd, distiller, 1.0);
    return terms;
  };
  TrainRecord rec = run_loop(student, dataset, config, spec, step, snapshots);
  check_teacher_unchanged(t, teacher_digest, spec.procedure);
  return {student, std::move(rec)};
}

std::pair<Detector, TrainRecord> reverse_distill(const Detector& edge_teacher, const Detector& tutor_student,
                                                 const DetectionDataset& dataset, const FGDConfig& fgd,
                                                 const RDConfig& rd, const TrainConfig& config,
                                                 const SnapshotOptions& snapshots) {
  fgd.validate();
  rd.validate();
  if (tutor_student->parameter_count() < edge_teacher->parameter_count()) {
    throw ConfigError("reverse_distill: the student (" + std::to_string(tutor_student->parameter_count()) +
                      " parameters) is smaller than the teacher (" +
                      std::to_string(edge_teacher->parameter_count()) + ")");
  }
  if (edge_teacher->config().strides != tutor_student->config().strides) {
    throw ConfigError("reverse_distill: teacher and student pyramids use different strides");
  }
  std::vector<std::string> warnings;
  if (rd.beta_rd > 0.0) {
    require_covers(tutor_student, dataset, "student");
  } else {
    const auto known = model_category_set(edge_teacher);
    for (const auto& c : dataset.labelled_categories()) {
      if (!known.contains(c)) {
        warnings.push_back("category '" + c +
                           "' is unknown to the teacher and beta_rd = 0: its labels cannot influence training");
      }
    }
    for (const auto& w : warnings) log_info("warning: " + w);
  }

  Detector t = edge_teacher;
  t->eval();
  const std::string teacher_digest = parameter_digest(t);

  torch::manual_seed(config.seed);
  Detector student = clone_detector(tutor_student);
  FeatureDistiller distiller(student->config().strides.size(), t->config().neck_channels,
                             student->config().neck_channels);
  LoopSpec spec;
  spec.procedure = "reverse_distill";
  spec.config = base_config(config);
  spec.config["fgd"] = fgd.to_json();
  spec.config["rd"] = rd.to_json();
  spec.extra_parameters = distiller->parameters();
  spec.drop_unknown_labels = rd.beta_rd == 0.0;
  const bool use_head = rd.beta_rd > 0.0;
  if (!use_head) spec.trainable = [](const std::string& name) { return part_of(name) != Part::head; };
  const auto& dcfg = student->config();
  auto step = [&](const Batch& batch) {
    FeaturePyramid tp;
    {
      torch::NoGradGuard guard;
      tp = t->features(batch.images);
    }
    LossTerms terms;
    if (use_head) {
      auto fr = student->forward(batch.images);
      if (rd.alpha_rd > 0.0) add_feature_terms(terms, tp, fr.pyramid, batch, fgd, distiller, rd.alpha_rd);
      add_detection_terms(terms, fr, batch, dcfg, rd.beta_rd);
    } else {
      add_feature_terms(terms, tp, student->features(batch.images), batch, fgd, distiller, rd.alpha_rd);
    }
    return terms;
  };
  TrainRecord rec = run_loop(student, dataset, config, spec, step, snapshots);
  rec.warnings = std::move(warnings);
  check_teacher_unchanged(t, teacher_digest, spec.procedure);
  return {student, std::move(rec)};
}

std::pair<Detector, TrainRecord> redistill_finetune(const Detector& updated_tutor, const Detector& edge_model,
                                                    const DetectionDataset& dataset,
                                                    const std::vector<std::string>& categories,
                                                    const FGDConfig& fgd, const TrainConfig& config,
                                                    std::uint64_t init_seed, const SnapshotOptions& snapshots) {
  const auto known = model_category_set(updated_tutor);
  for (const auto& c : categories) {
    if (!known.contains(c)) throw ConfigError("redistill: category '" + c + "' is not in the tutor's class plan");
  }
  Detector reshaped = with_categories(edge_model, categories, init_seed);
  auto [student, rec] = distill(updated_tutor, reshaped, dataset, fgd, config, snapshots);
  rec.procedure = "redistill";
  return {student, std::move(rec)};
}

}  // namespace diredi
