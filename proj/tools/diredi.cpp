// diredi: command line front end for the distill / reverse-distill pipeline.

#include <CLI11.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "diredi/checkpoint.hpp"
#include "diredi/dataset.hpp"
#include "diredi/error.hpp"
#include "diredi/evaluation.hpp"
#include "diredi/log.hpp"
#include "diredi/packet.hpp"
#include "diredi/pipeline.hpp"
#include "diredi/train.hpp"
#include "diredi/verify.hpp"
#include "diredi/weights.hpp"

namespace fs = std::filesystem;
using namespace diredi;

namespace {

enum Exit : int { kOk = 0, kOther = 1, kConfig = 2, kGate = 3, kNumeric = 4, kIntegrity = 5 };

// Fails with a message naming the command that produces the missing input.
void require_input(const fs::path& path, const std::string& what, const std::string& producer) {
  if (!fs::exists(path)) {
    throw IoError("missing " + what + " '" + path.string() + "' (produced by `diredi " + producer + "`)");
  }
}

nlohmann::json load_config(const std::optional<fs::path>& path) {
  if (!path) return nlohmann::json::object();
  if (!fs::exists(*path)) throw ConfigError("config file not found: " + path->string());
  try {
    auto j = read_json(*path);
    if (!j.is_object()) throw ConfigError("config file is not a JSON object: " + path->string());
    return j;
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
}

template <typename T>
T section(const nlohmann::json& cfg, const char* key, const T& defaults) {
  if (!cfg.contains(key)) return defaults;
  return T::from_json(cfg.at(key), defaults);
}

EvalConfig eval_section(const nlohmann::json& cfg) {
  return cfg.contains("eval") ? EvalConfig::from_json(cfg.at("eval")) : EvalConfig{};
}

std::vector<std::string> or_default(const std::vector<std::string>& given, const std::vector<std::string>& fallback) {
  return given.empty() ? fallback : given;
}

std::vector<std::string> dataset_categories(const DetectionDataset& ds) {
  const auto labelled = ds.labelled_categories();
  std::vector<std::string> out;
  for (const auto& c : ds.category_names) {
    if (labelled.contains(c)) out.push_back(c);
  }
  return out;
}

void write_record(const std::optional<fs::path>& path, const TrainRecord& rec) {
  if (path) write_json(*path, rec.to_json());
}

struct Common {
  std::optional<fs::path> config;
  std::optional<fs::path> record;
  std::uint64_t seed = 0;
  fs::path out;
};

void add_common(CLI::App* cmd, Common& c, const std::string& out_help) {
  cmd->add_option("--config", c.config, "JSON config with optional train/fgd/rd/eval/thresholds/model sections");
  cmd->add_option("--record", c.record, "Write the training record JSON here");
  cmd->add_option("--seed", c.seed, "Seed");
  cmd->add_option("--out", c.out, out_help)->required();
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  CLI::App app{"diredi: distillation, reverse distillation and knowledge-packet tooling for edge detectors"};
  app.require_subcommand(1);
  int verbosity = 0;
  bool quiet = false;
  app.add_flag("-v,--verbose", verbosity, "More logging (repeatable)");
  app.add_flag("-q,--quiet", quiet, "Errors only");

  // run
  std::string plan_arg;
  std::optional<fs::path> run_out;
  std::optional<std::uint64_t> run_seed;
  bool resume = true;
  bool inject_noise = false;
  auto* run = app.add_subcommand("run", "Run every stage of a plan file or built-in preset");
  run->add_option("plan", plan_arg, "Plan JSON file or preset (toy-exp1, toy-exp2, voc-exp1, voc-exp2)")->required();
  run->add_option("--out", run_out, "Run directory (default $DIREDI_OUT_ROOT/<plan_id> or ./runs/<plan_id>)");
  run->add_option("--seed", run_seed, "Override the plan seed");
  run->add_flag("--resume,!--no-resume", resume, "Skip stages whose digests still match (default on)");
  run->add_flag("--inject-noise-delta", inject_noise, "Testing hook: replace the delta by norm-matched noise");

  // plan
  std::string preset_name;
  fs::path plan_out;
  auto* plan_cmd = app.add_subcommand("plan", "Write a built-in preset as an editable plan file");
  plan_cmd->add_option("preset", preset_name, "Preset name")->required();
  plan_cmd->add_option("--out", plan_out, "Output plan file")->required();

  // toy-data
  int toy_images = 500;
  std::uint64_t toy_seed = 0;
  std::vector<std::string> toy_classes;
  fs::path toy_out;
  auto* toy = app.add_subcommand("toy-data", "Generate a synthetic shape dataset");
  toy->add_option("--images", toy_images, "Number of images");
  toy->add_option("--seed", toy_seed, "Generator seed");
  toy->add_option("--classes", toy_classes, "Shape classes (default all)");
  toy->add_option("--out", toy_out, "Dataset directory")->required();

  // train-large
  Common tl;
  fs::path tl_data;
  std::string tl_tier = "large";
  std::vector<std::string> tl_cats;
  auto* train_large = app.add_subcommand("train-large", "Train a detector from scratch on labelled data");
  train_large->add_option("--data", tl_data, "Dataset directory")->required();
  train_large->add_option("--tier", tl_tier, "Model tier: large, tutor, edge, toy");
  train_large->add_option("--categories", tl_cats, "Categories (default: labelled in data)");
  add_common(train_large, tl, "Output checkpoint");

  // distill
  Common ds;
  fs::path ds_teacher, ds_data;
  std::string ds_tier = "edge";
  std::vector<std::string> ds_cats;
  auto* distill_cmd = app.add_subcommand("distill", "Forward distillation from a larger teacher");
  distill_cmd->add_option("--teacher", ds_teacher, "Teacher checkpoint")->required();
  distill_cmd->add_option("--data", ds_data, "Dataset directory")->required();
  distill_cmd->add_option("--tier", ds_tier, "Student tier");
  distill_cmd->add_option("--categories", ds_cats, "Student categories (default: teacher's)");
  add_common(distill_cmd, ds, "Output checkpoint");

  // reverse-distill
  Common rd;
  fs::path rd_teacher, rd_tutor, rd_data;
  std::vector<std::string> rd_cats;
  auto* rd_cmd = app.add_subcommand("reverse-distill", "Train a tutor against a frozen edge model");
  rd_cmd->add_option("--teacher", rd_teacher, "Edge model checkpoint (frozen)")->required();
  rd_cmd->add_option("--tutor", rd_tutor, "Tutor checkpoint to start from")->required();
  rd_cmd->add_option("--data", rd_data, "Dataset directory")->required();
  rd_cmd->add_option("--categories", rd_cats, "Re-shape the tutor head to these categories first");
  add_common(rd_cmd, rd, "Output checkpoint");

  // extract-delta
  fs::path ex_t1, ex_t2, ex_out, ex_aliases;
  std::optional<fs::path> ex_config, ex_original;
  std::vector<std::string> ex_shareable;
  auto* extract = app.add_subcommand("extract-delta", "Build a knowledge packet from two tutors");
  extract->add_option("--tutor1", ex_t1, "Emulation tutor checkpoint")->required();
  extract->add_option("--tutor2", ex_t2, "Customer tutor checkpoint")->required();
  extract->add_option("--shareable", ex_shareable, "Category names that may appear in the packet")->required();
  extract->add_option("--original", ex_original, "Original tutor (source of the presumed-data fingerprint)");
  extract->add_option("--config", ex_config, "JSON config: parts, gamma_delta");
  extract->add_option("--out", ex_out, "Packet file")->required();
  extract->add_option("--aliases-out", ex_aliases, "Customer-side alias file")->required();

  // apply-delta
  fs::path ap_model, ap_packet, ap_out;
  double ap_delta = 1.0;
  std::uint64_t ap_seed = 0;
  bool ap_noise = false;
  auto* apply = app.add_subcommand("apply-delta", "Apply a knowledge packet to a tutor");
  apply->add_option("--model", ap_model, "Original tutor checkpoint")->required();
  apply->add_option("--packet", ap_packet, "Packet file")->required();
  apply->add_option("--delta-update", ap_delta, "Update factor");
  apply->add_flag("--inject-noise-delta", ap_noise, "Testing hook: apply norm-matched noise instead");
  apply->add_option("--seed", ap_seed, "Noise seed");
  apply->add_option("--out", ap_out, "Output checkpoint")->required();

  // verify
  fs::path vf_orig, vf_upd, vf_data, vf_out;
  std::optional<fs::path> vf_config;
  auto* verify_cmd = app.add_subcommand("verify", "Check an updated tutor for regressions");
  verify_cmd->add_option("--original", vf_orig, "Original tutor checkpoint")->required();
  verify_cmd->add_option("--updated", vf_upd, "Updated tutor checkpoint")->required();
  verify_cmd->add_option("--data", vf_data, "Verification dataset directory")->required();
  verify_cmd->add_option("--config", vf_config, "JSON config: thresholds, eval");
  verify_cmd->add_option("--out", vf_out, "Verification report")->required();

  // redistill
  Common rc;
  fs::path rc_tutor, rc_edge, rc_data;
  std::optional<fs::path> rc_aliases;
  std::vector<std::string> rc_cats;
  auto* redistill = app.add_subcommand("redistill", "Fine-tune an edge model from the updated tutor");
  redistill->add_option("--tutor", rc_tutor, "Updated tutor checkpoint")->required();
  redistill->add_option("--edge", rc_edge, "Edge model checkpoint")->required();
  redistill->add_option("--data", rc_data, "Customer dataset directory")->required();
  redistill->add_option("--aliases", rc_aliases, "Customer alias file restoring private names");
  redistill->add_option("--categories", rc_cats, "Target categories (default: labelled in data)");
  add_common(redistill, rc, "Output checkpoint");

  // train-direct
  Common td;
  fs::path td_model, td_data;
  std::vector<std::string> td_cats;
  auto* direct = app.add_subcommand("train-direct", "Fine-tune a model on labelled data without a teacher");
  direct->add_option("--model", td_model, "Starting checkpoint")->required();
  direct->add_option("--data", td_data, "Dataset directory")->required();
  direct->add_option("--categories", td_cats, "Re-shape the head to these categories first");
  add_common(direct, td, "Output checkpoint");

  // evaluate
  fs::path ev_model, ev_data, ev_out;
  std::optional<fs::path> ev_config, ev_aliases;
  std::vector<std::string> ev_cats;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Evaluate a checkpoint on a dataset");
  evaluate_cmd->add_option("--model", ev_model, "Checkpoint")->required();
  evaluate_cmd->add_option("--data", ev_data, "Dataset directory")->required();
  evaluate_cmd->add_option("--categories", ev_cats, "Categories to score");
  evaluate_cmd->add_option("--aliases", ev_aliases, "Alias file restoring private names");
  evaluate_cmd->add_option("--config", ev_config, "JSON config: eval");
  evaluate_cmd->add_option("--out", ev_out, "Report file")->required();

  // report
  std::optional<fs::path> rp_run;
  std::vector<std::string> rp_reports, rp_cats;
  fs::path rp_out;
  auto* report = app.add_subcommand("report", "Render the comparison table and AP chart");
  report->add_option("--run", rp_run, "Run directory (uses reports/eval/*.json)");
  report->add_option("--report", rp_reports, "label=path of an evaluation report (repeatable)");
  report->add_option("--categories", rp_cats, "Categories (default: the run plan's evaluation categories)");
  report->add_option("--out", rp_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }
  set_log_level(quiet ? LogLevel::quiet : verbosity > 0 ? LogLevel::debug : LogLevel::info);

  try {
    if (*run) {
      auto plan = load_plan(plan_arg);
      RunOptions opt;
      opt.output_dir = run_out;
      opt.seed = run_seed;
      opt.resume = resume;
      opt.inject_noise_delta = inject_noise;
      const auto manifest = run_plan(plan, opt);
      for (const auto& s : manifest.stages) {
        std::cout << s.name << ": " << s.status << (s.reused ? " (reused)" : "")
                  << (s.message.empty() ? "" : " - " + s.message) << "\n";
      }
      std::cout << "run " << manifest.run_dir.string() << ": " << manifest.status << "\n";
      return manifest.status == "gate_failed" ? kGate : kOk;
    }
    if (*plan_cmd) {
      save_plan(ExperimentPlan::preset(preset_name), plan_out);
      return kOk;
    }
    if (*toy) {
      ToySpec spec;
      spec.num_images = toy_images;
      spec.seed = toy_seed;
      if (!toy_classes.empty()) spec.classes = toy_classes;
      save_dataset(generate_toy_dataset(spec), toy_out);
      return kOk;
    }
    if (*train_large) {
      require_input(tl_data, "dataset", "toy-data");
      const auto cfg = load_config(tl.config);
      const auto data = load_dataset(tl_data);
      const auto cats = or_default(tl_cats, dataset_categories(data));
      auto model_cfg = cfg.contains("model") ? DetectorConfig::from_json(cfg.at("model"))
                                             : DetectorConfig::preset(tier_from_string(tl_tier), {});
      model_cfg.categories = cats;
      model_cfg.num_classes = static_cast<int>(cats.size());
      auto train = section(cfg, "train", TrainConfig{});
      train.seed += tl.seed;
      auto [model, rec] = train_direct(build_detector(model_cfg, tl.seed), data, train);
      save_checkpoint(model, tl.out);
      write_record(tl.record, rec);
      return kOk;
    }
    if (*distill_cmd) {
      require_input(ds_teacher, "teacher checkpoint", "train-large");
      require_input(ds_data, "dataset", "toy-data");
      const auto cfg = load_config(ds.config);
      auto teacher = load_checkpoint(ds_teacher);
      const auto cats = or_default(ds_cats, teacher->config().categories);
      auto model_cfg = cfg.contains("model") ? DetectorConfig::from_json(cfg.at("model"))
                                             : DetectorConfig::preset(tier_from_string(ds_tier), {});
      model_cfg.categories = cats;
      model_cfg.num_classes = static_cast<int>(cats.size());
      auto train = section(cfg, "train", TrainConfig{});
      train.seed += ds.seed;
      auto [model, rec] = distill(teacher, build_detector(model_cfg, ds.seed), load_dataset(ds_data),
                                  section(cfg, "fgd", FGDConfig{}), train);
      save_checkpoint(model, ds.out);
      write_record(ds.record, rec);
      return kOk;
    }
    if (*rd_cmd) {
      require_input(rd_teacher, "edge checkpoint", "distill");
      require_input(rd_tutor, "tutor checkpoint", "distill");
      require_input(rd_data, "dataset", "toy-data");
      const auto cfg = load_config(rd.config);
      auto tutor = load_checkpoint(rd_tutor);
      if (!rd_cats.empty()) tutor = with_categories(tutor, rd_cats, rd.seed);
      auto train = section(cfg, "train", TrainConfig{});
      train.seed += rd.seed;
      auto [model, rec] = reverse_distill(load_checkpoint(rd_teacher), tutor, load_dataset(rd_data),
                                          section(cfg, "fgd", FGDConfig{}), section(cfg, "rd", RDConfig{}), train);
      save_checkpoint(model, rd.out);
      write_record(rd.record, rec);
      return kOk;
    }
    if (*extract) {
      require_input(ex_t1, "tutor 1 checkpoint", "reverse-distill");
      require_input(ex_t2, "tutor 2 checkpoint", "reverse-distill");
      const auto cfg = load_config(ex_config);
      const auto parts = cfg.value("parts", std::vector<std::string>{"neck", "head"});
      const double gamma = cfg.value("gamma_delta", 1.0);
      auto t1 = load_checkpoint(ex_t1);
      auto t2 = load_checkpoint(ex_t2);
      auto plan = t1->config().categories;
      for (const auto& c : t2->config().categories) {
        if (std::find(plan.begin(), plan.end(), c) == plan.end()) plan.push_back(c);
      }
      KnowledgePacket packet;
      packet.delta = compute_delta(extract_weights(align_to_categories(t1, plan), parts),
                                   extract_weights(align_to_categories(t2, plan), parts), gamma);
      const std::set<std::string> shareable(ex_shareable.begin(), ex_shareable.end());
      std::map<std::string, std::string> aliases;
      auto& m = packet.manifest;
      m.class_plan = anonymize_categories(plan, shareable, aliases);
      m.emulation_plan = anonymize_categories(t1->config().categories, shareable, aliases);
      m.customer_plan = anonymize_categories(t2->config().categories, shareable, aliases);
      m.architecture_digest = architecture_digest(packet.delta);
      m.gamma_delta = gamma;
      m.created = packet_timestamp();
      if (ex_original) {
        require_input(*ex_original, "original tutor checkpoint", "distill");
        for (const auto& p : load_checkpoint(*ex_original)->provenance()) {
          if (p.contains("presumed_dataset_fingerprint")) {
            m.presumed_dataset_fingerprint = p["presumed_dataset_fingerprint"].get<std::string>();
          }
        }
      }
      serialize_packet(packet, ex_out);
      write_json(ex_aliases, {{"aliases", aliases}});
      return kOk;
    }
    if (*apply) {
      require_input(ap_model, "tutor checkpoint", "distill");
      require_input(ap_packet, "knowledge packet", "extract-delta");
      auto packet = deserialize_packet(ap_packet);
      auto delta = ap_noise ? noise_like(packet.delta, ap_seed) : packet.delta;
      auto updated = apply_delta(align_to_categories(load_checkpoint(ap_model), packet.manifest.class_plan), delta,
                                 ap_delta);
      save_checkpoint(updated, ap_out);
      return kOk;
    }
    if (*verify_cmd) {
      require_input(vf_orig, "original tutor checkpoint", "distill");
      require_input(vf_upd, "updated tutor checkpoint", "apply-delta");
      require_input(vf_data, "dataset", "toy-data");
      const auto cfg = load_config(vf_config);
      const auto thresholds =
          cfg.contains("thresholds") ? VerificationThresholds::from_json(cfg.at("thresholds")) : VerificationThresholds{};
      auto original = load_checkpoint(vf_orig);
      auto updated = load_checkpoint(vf_upd);
      auto result = verify_update(original, updated, load_dataset(vf_data), thresholds, eval_section(cfg));
      write_json(vf_out, result.to_json());
      std::cout << "verdict: " << (result.passed ? "pass" : "fail") << "\n";
      for (const auto& r : result.regressions()) std::cout << "regressed: " << r << "\n";
      return result.passed ? kOk : kGate;
    }
    if (*redistill) {
      require_input(rc_tutor, "updated tutor checkpoint", "apply-delta");
      require_input(rc_edge, "edge checkpoint", "distill");
      require_input(rc_data, "dataset", "toy-data");
      const auto cfg = load_config(rc.config);
      auto tutor = load_checkpoint(rc_tutor);
      if (rc_aliases) {
        require_input(*rc_aliases, "alias file", "extract-delta");
        const auto aliases = read_json(*rc_aliases).at("aliases");
        auto names = tutor->config().categories;
        for (auto& n : names) {
          if (aliases.contains(n)) n = aliases.at(n).get<std::string>();
        }
        tutor = rename_categories(tutor, names);
      }
      const auto data = load_dataset(rc_data);
      auto train = section(cfg, "train", TrainConfig{});
      train.seed += rc.seed;
      auto [model, rec] = redistill_finetune(tutor, load_checkpoint(rc_edge), data,
                                             or_default(rc_cats, dataset_categories(data)),
                                             section(cfg, "fgd", FGDConfig{}), train, rc.seed);
      save_checkpoint(model, rc.out);
      write_record(rc.record, rec);
      return kOk;
    }
    if (*direct) {
      require_input(td_model, "checkpoint", "distill");
      require_input(td_data, "dataset", "toy-data");
      const auto cfg = load_config(td.config);
      auto model = load_checkpoint(td_model);
      if (!td_cats.empty()) model = with_categories(model, td_cats, td.seed);
      auto train = section(cfg, "train", TrainConfig{});
      train.seed += td.seed;
      auto [trained, rec] = train_direct(model, load_dataset(td_data), train);
      save_checkpoint(trained, td.out);
      write_record(td.record, rec);
      return kOk;
    }
    if (*evaluate_cmd) {
      require_input(ev_model, "checkpoint", "train-large");
      require_input(ev_data, "dataset", "toy-data");
      const auto cfg = load_config(ev_config);
      auto model = load_checkpoint(ev_model);
      if (ev_aliases) {
        const auto aliases = read_json(*ev_aliases).at("aliases");
        auto names = model->config().categories;
        for (auto& n : names) {
          if (aliases.contains(n)) n = aliases.at(n).get<std::string>();
        }
        model = rename_categories(model, names);
      }
      const auto result = evaluate(model, load_dataset(ev_data), eval_section(cfg), ev_cats);
      write_json(ev_out, result.to_json());
      std::cout << "mAP " << result.map << "\n";
      return kOk;
    }
    if (*report) {
      std::vector<ComparisonRow> rows;
      std::vector<std::string> cats = rp_cats;
      if (rp_run) {
        require_input(*rp_run / "manifest.json", "run manifest", "run");
        rows = load_comparison_rows(*rp_run);
        if (cats.empty() && fs::exists(*rp_run / "plan.json")) {
          cats = ExperimentPlan::from_json(read_json(*rp_run / "plan.json")).categories.eval_categories;
        }
      }
      for (const auto& spec : rp_reports) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos) throw ConfigError("--report expects label=path, got '" + spec + "'");
        const fs::path p = spec.substr(eq + 1);
        require_input(p, "evaluation report", "evaluate");
        rows.push_back({spec.substr(0, eq), EvalReport::from_json(read_json(p))});
      }
      if (rows.empty()) throw ConfigError("report: no evaluation reports given");
      if (cats.empty()) {
        for (const auto& [c, r] : rows.front().report.classes) cats.push_back(c);
      }
      write_comparison(rows, cats, rp_out);
      std::cout << render_comparison_table(rows, cats);
      return kOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const GateFailure& e) {
    std::cerr << "verification failed: " << e.what() << "\n";
    return kGate;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const IoError& e) {
    std::cerr << "integrity/io error: " << e.what() << "\n";
    return kIntegrity;
  } catch (const DigestMismatchError& e) {
    std::cerr << "integrity/io error: " << e.what() << "\n";
    return kIntegrity;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
  return kOther;
}
