#include "diredi/detector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "diredi/error.hpp"
#include "diredi/hash.hpp"

namespace diredi {

std::string to_string(Tier tier) {
  switch (tier) {
    case Tier::large: return "large";
    case Tier::tutor: return "tutor";
    case Tier::edge: return "edge";
    case Tier::toy: return "toy";
  }
  return "toy";
}

Tier tier_from_string(const std::string& name) {
  if (name == "large") return Tier::large;
  if (name == "tutor") return Tier::tutor;
  if (name == "edge") return Tier::edge;
  if (name == "toy") return Tier::toy;
  throw ConfigError("unknown tier '" + name + "'");
}

std::string to_string(Part part) {
  switch (part) {
    case Part::backbone: return "backbone";
    case Part::neck: return "neck";
    case Part::head: return "head";
  }
  return "backbone";
}

Part part_from_string(const std::string& name) {
  if (name == "backbone") return Part::backbone;
  if (name == "neck") return Part::neck;
  if (name == "head") return Part::head;
  throw ConfigError("unknown model part '" + name + "'");
}

Part part_of(const std::string& parameter_name) {
  const auto dot = parameter_name.find('.');
  return part_from_string(parameter_name.substr(0, dot));
}

// ---------------------------------------------------------------- config

void DetectorConfig::validate() const {
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (!categories.empty() && static_cast<int>(categories.size()) != num_classes) {
    throw ConfigError("categories list has " + std::to_string(categories.size()) +
                      " entries but num_classes is " + std::to_string(num_classes));
  }
  if (in_channels < 1) throw ConfigError("in_channels must be positive");
  if (backbone_channel_plan.empty()) throw ConfigError("backbone channel plan is empty");
  for (int c : backbone_channel_plan) {
    if (c <= 0) throw ConfigError("backbone channel plan entries must be positive");
  }
  if (blocks_per_stage < 1) throw ConfigError("blocks_per_stage must be >= 1");
  if (neck_channels <= 0) throw ConfigError("neck_channels must be positive");
  if (head_conv_depth < 1) throw ConfigError("head_conv_depth must be >= 1");
  if (head_norm_groups < 1 || neck_channels % head_norm_groups != 0) {
    throw ConfigError("head_norm_groups must divide neck_channels");
  }
  if (strides.empty()) throw ConfigError("strides must not be empty");
  for (std::size_t l = 0; l < strides.size(); ++l) {
    const int s = strides[l];
    if (s < 2 || (s & (s - 1)) != 0) throw ConfigError("strides must be powers of two >= 2");
    if (l > 0 && s != 2 * strides[l - 1]) {
      throw ConfigError("strides must be strictly increasing by a factor of two");
    }
  }
  if (stage_for_level(strides.size() - 1) >= static_cast<int>(backbone_channel_plan.size())) {
    throw ConfigError("largest stride exceeds the depth of the backbone channel plan");
  }
  if (scale_bounds.size() != strides.size() + 1) {
    throw ConfigError("scale_bounds must have one more entry than strides");
  }
  for (std::size_t i = 1; i < scale_bounds.size(); ++i) {
    if (!(scale_bounds[i] > scale_bounds[i - 1])) throw ConfigError("scale_bounds must increase");
  }
}

int DetectorConfig::stage_for_level(std::size_t level) const {
  int s = strides.at(level);
  int stage = -1;
  while (s > 1) {
    s >>= 1;
    ++stage;
  }
  return stage;
}

DetectorConfig DetectorConfig::preset(Tier tier, std::vector<std::string> categories) {
  DetectorConfig c;
  c.tier = tier;
  c.num_classes = static_cast<int>(categories.size());
  c.categories = std::move(categories);
  c.neck_channels = 32;
  c.strides = {8, 16, 32};
  c.scale_bounds = {0.f, 16.f, 32.f, std::numeric_limits<float>::infinity()};
  switch (tier) {
    case Tier::large:
      c.backbone_channel_plan = {16, 32, 64, 96, 128};
      c.blocks_per_stage = 2;
      c.head_conv_depth = 2;
      break;
    case Tier::tutor:
      c.backbone_channel_plan = {16, 24, 48, 64, 96};
      c.blocks_per_stage = 2;
      c.head_conv_depth = 2;
      break;
    case Tier::edge:
      c.backbone_channel_plan = {8, 16, 24, 32, 48};
      c.blocks_per_stage = 1;
      c.head_conv_depth = 1;
      break;
    case Tier::toy:
      c.backbone_channel_plan = {8, 16, 32, 48, 64};
      c.blocks_per_stage = 1;
      c.head_conv_depth = 1;
      break;
  }
  return c;
}

nlohmann::json DetectorConfig::to_json() const {
  nlohmann::json bounds = nlohmann::json::array();
  for (float b : scale_bounds) {
    if (std::isinf(b)) bounds.push_back("inf");
    else bounds.push_back(b);
  }
  return {{"tier", to_string(tier)},
          {"num_classes", num_classes},
          {"categories", categories},
          {"in_channels", in_channels},
          {"backbone_channel_plan", backbone_channel_plan},
          {"blocks_per_stage", blocks_per_stage},
          {"neck_channels", neck_channels},
          {"strides", strides},
          {"scale_bounds", bounds},
          {"head_conv_depth", head_conv_depth},
          {"head_norm_groups", head_norm_groups}};
}

DetectorConfig DetectorConfig::from_json(const nlohmann::json& j) {
  DetectorConfig c;
  try {
    if (j.contains("tier")) c = preset(tier_from_string(j.at("tier").get<std::string>()), {});
    if (j.contains("categories")) c.categories = j.at("categories").get<std::vector<std::string>>();
    c.num_classes = j.value("num_classes", static_cast<int>(c.categories.size()));
    c.in_channels = j.value("in_channels", c.in_channels);
    c.backbone_channel_plan = j.value("backbone_channel_plan", c.backbone_channel_plan);
    c.blocks_per_stage = j.value("blocks_per_stage", c.blocks_per_stage);
    c.neck_channels = j.value("neck_channels", c.neck_channels);
    c.strides = j.value("strides", c.strides);
    if (j.contains("scale_bounds")) {
      c.scale_bounds.clear();
      for (const auto& b : j.at("scale_bounds")) {
        if (b.is_string()) c.scale_bounds.push_back(std::numeric_limits<float>::infinity());
        else c.scale_bounds.push_back(b.get<float>());
      }
    }
    c.head_conv_depth = j.value("head_conv_depth", c.head_conv_depth);
    c.head_norm_groups = j.value("head_norm_groups", c.head_norm_groups);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("detector config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------- modules

BackboneImpl::BackboneImpl(const DetectorConfig& cfg) {
  stages_ = register_module("stages", torch::nn::ModuleList());
  int in = cfg.in_channels;
  for (int out : cfg.backbone_channel_plan) {
    torch::nn::Sequential stage;
    for (int b = 0; b < cfg.blocks_per_stage; ++b) {
      stage->push_back(torch::nn::Conv2d(
          torch::nn::Conv2dOptions(b == 0 ? in : out, out, 3).stride(b == 0 ? 2 : 1).padding(1).bias(false)));
      stage->push_back(torch::nn::BatchNorm2d(out));
      stage->push_back(torch::nn::ReLU());
    }
    stages_->push_back(stage);
    in = out;
  }
}

std::vector<torch::Tensor> BackboneImpl::forward(torch::Tensor x) {
  std::vector<torch::Tensor> outs;
  outs.reserve(stages_->size());
  for (const auto& stage : *stages_) {
    x = stage->as<torch::nn::Sequential>()->forward(x);
    outs.push_back(x);
  }
  return outs;
}

NeckImpl::NeckImpl(const std::vector<int>& in_channels, int out_channels) {
  lateral_ = register_module("lateral", torch::nn::ModuleList());
  output_ = register_module("output", torch::nn::ModuleList());
  for (int c : in_channels) {
    lateral_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(c, out_channels, 1)));
    output_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(out_channels, out_channels, 3).padding(1)));
  }
}

std::vector<torch::Tensor> NeckImpl::forward(const std::vector<torch::Tensor>& inputs) {
  const auto n = inputs.size();
  std::vector<torch::Tensor> merged(n);
  merged[n - 1] = lateral_[n - 1]->as<torch::nn::Conv2d>()->forward(inputs[n - 1]);
  for (std::size_t i = n - 1; i-- > 0;) {
    auto lat = lateral_[i]->as<torch::nn::Conv2d>()->forward(inputs[i]);
    auto up = torch::nn::functional::interpolate(
        merged[i + 1], torch::nn::functional::InterpolateFuncOptions()
                           .size(std::vector<int64_t>{lat.size(2), lat.size(3)})
                           .mode(torch::kNearest));
    merged[i] = lat + up;
  }
  std::vector<torch::Tensor> outs(n);
  for (std::size_t i = 0; i < n; ++i) outs[i] = output_[i]->as<torch::nn::Conv2d>()->forward(merged[i]);
  return outs;
}

HeadImpl::HeadImpl(int channels, int num_classes, int depth, int groups, int num_levels) {
  cls_tower_ = torch::nn::Sequential();
  box_tower_ = torch::nn::Sequential();
  for (int d = 0; d < depth; ++d) {
    for (auto* tower : {&cls_tower_, &box_tower_}) {
      (*tower)->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)));
      (*tower)->push_back(torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, channels)));
      (*tower)->push_back(torch::nn::ReLU());
    }
  }
  register_module("cls_tower", cls_tower_);
  register_module("box_tower", box_tower_);
  cls_logits_ = register_module(
      "cls_logits", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, num_classes, 3).padding(1)));
  box_pred_ = register_module("box_pred", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, 4, 3).padding(1)));
  centerness_ =
      register_module("centerness", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, 1, 3).padding(1)));
  scales_ = register_parameter("scales", torch::ones({num_levels}));
}

HeadOutputs HeadImpl::forward(const std::vector<torch::Tensor>& features) {
  HeadOutputs out;
  for (std::size_t l = 0; l < features.size(); ++l) {
    auto c = cls_tower_->forward(features[l]);
    auto b = box_tower_->forward(features[l]);
    out.class_logits.push_back(cls_logits_->forward(c));
    out.centerness_logits.push_back(centerness_->forward(b));
    auto raw = scales_[static_cast<int64_t>(l)] * box_pred_->forward(b);
    out.box_regression.push_back(torch::exp(torch::clamp(raw, -8.0, 8.0)));
  }
  return out;
}

namespace {

void init_parameters(DetectorImpl& det) {
  torch::NoGradGuard guard;
  const double prior_bias = -std::log((1.0 - kClassPrior) / kClassPrior);
  for (auto& item : det.named_parameters()) {
    const std::string& name = item.key();
    torch::Tensor& p = item.value();
    const Part part = part_of(name);
    const bool is_weight = name.ends_with(".weight");
    const bool is_norm = p.dim() == 1 && is_weight;
    if (name == "head.scales") continue;
    if (is_norm) {
      p.fill_(1.0);
      continue;
    }
    if (!is_weight) {
      if (name == "head.cls_logits.bias") p.fill_(prior_bias);
      else p.zero_();
      continue;
    }
    switch (part) {
      case Part::backbone:
        torch::nn::init::kaiming_normal_(p, 0.0, torch::kFanOut, torch::kReLU);
        break;
      case Part::neck:
        torch::nn::init::kaiming_uniform_(p, 1.0);
        break;
      case Part::head:
        torch::nn::init::normal_(p, 0.0, 0.01);
        break;
    }
  }
}

}  // namespace

DetectorImpl::DetectorImpl(DetectorConfig cfg, std::uint64_t seed) : config_(std::move(cfg)), seed_(seed) {
  if (config_.categories.empty()) {
    for (int k = 0; k < config_.num_classes; ++k) config_.categories.push_back("class_" + std::to_string(k));
  }
  config_.validate();
  backbone_ = register_module("backbone", Backbone(config_));
  std::vector<int> level_channels;
  for (std::size_t l = 0; l < config_.strides.size(); ++l) {
    level_channels.push_back(config_.backbone_channel_plan[config_.stage_for_level(l)]);
  }
  neck_ = register_module("neck", Neck(level_channels, config_.neck_channels));
  head_ = register_module("head", Head(config_.neck_channels, config_.num_classes, config_.head_conv_depth,
                                       config_.head_norm_groups, static_cast<int>(config_.strides.size())));
  init_parameters(*this);
}

FeaturePyramid DetectorImpl::features(torch::Tensor images) {
  if (images.dim() != 4) throw ShapeError("forward: expected [B, C, H, W] images");
  if (images.size(0) == 0 || images.size(2) == 0 || images.size(3) == 0) {
    throw ShapeError("forward: empty batch or zero resolution");
  }
  if (images.size(1) != config_.in_channels) {
    throw ShapeError("forward: expected " + std::to_string(config_.in_channels) + " input channels, got " +
                     std::to_string(images.size(1)));
  }
  images = pad_to_multiple(images, config_.max_stride());
  auto stages = backbone_->forward(images);
  std::vector<torch::Tensor> selected;
  for (std::size_t l = 0; l < config_.strides.size(); ++l) selected.push_back(stages[config_.stage_for_level(l)]);
  FeaturePyramid pyr;
  pyr.strides = config_.strides;
  pyr.levels = neck_->forward(selected);
  return pyr;
}

ForwardResult DetectorImpl::forward(torch::Tensor images) {
  ForwardResult r;
  r.pyramid = features(std::move(images));
  r.head = head_->forward(r.pyramid.levels);
  return r;
}

std::vector<std::pair<std::string, torch::Tensor>> DetectorImpl::named_part_parameters(Part part) const {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& item : named_parameters()) {
    if (part_of(item.key()) == part) out.emplace_back(item.key(), item.value());
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  return out;
}

std::int64_t DetectorImpl::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

Detector build_detector(const DetectorConfig& config, std::uint64_t seed) {
  config.validate();
  torch::manual_seed(seed);
  return Detector(config, seed);
}

namespace {

void copy_state(DetectorImpl& dst, const DetectorImpl& src, const std::string& skip_prefix = "") {
  torch::NoGradGuard guard;
  auto src_params = src.named_parameters();
  for (auto& item : dst.named_parameters()) {
    if (!skip_prefix.empty() && item.key().starts_with(skip_prefix)) continue;
    item.value().copy_(src_params[item.key()]);
  }
  auto src_buffers = src.named_buffers();
  for (auto& item : dst.named_buffers()) item.value().copy_(src_buffers[item.key()]);
}

}  // namespace

Detector clone_detector(const Detector& detector) {
  torch::manual_seed(detector->seed());
  Detector copy(detector->config(), detector->seed());
  copy_state(*copy, *detector);
  copy->provenance() = detector->provenance();
  copy->train(detector->is_training());
  return copy;
}

void DetectorImpl::rename_categories(std::vector<std::string> names) {
  if (names.size() != static_cast<std::size_t>(config_.num_classes)) {
    throw ShapeError("rename_categories: " + std::to_string(names.size()) + " names for " +
                     std::to_string(config_.num_classes) + " classes");
  }
  config_.categories = std::move(names);
}

Detector with_categories(const Detector& detector, const std::vector<std::string>& categories,
                         std::uint64_t init_seed) {
  if (categories.empty()) throw ConfigError("with_categories: empty category list");
  auto cfg = detector->config();
  std::map<std::string, std::int64_t> old_rows;
  for (std::size_t k = 0; k < cfg.categories.size(); ++k) old_rows[cfg.categories[k]] = static_cast<std::int64_t>(k);
  cfg.categories = categories;
  cfg.num_classes = static_cast<int>(categories.size());

  torch::manual_seed(detector->seed());
  Detector out(cfg, detector->seed());
  copy_state(*out, *detector, "head.cls_logits.");
  out->provenance() = detector->provenance();

  torch::NoGradGuard guard;
  auto params = detector->named_parameters();
  const auto& old_w = params["head.cls_logits.weight"];
  const auto& old_b = params["head.cls_logits.bias"];
  auto& new_w = out->head()->cls_logits()->weight;
  auto& new_b = out->head()->cls_logits()->bias;
  const double prior_bias = -std::log((1.0 - kClassPrior) / kClassPrior);
  for (std::size_t k = 0; k < categories.size(); ++k) {
    const auto row = static_cast<std::int64_t>(k);
    if (auto it = old_rows.find(categories[k]); it != old_rows.end()) {
      new_w[row].copy_(old_w[it->second]);
      new_b[row].copy_(old_b[it->second]);
    } else {
      Sha256 h;
      h.update_u64(init_seed).update(categories[k]);
      const auto d = h.finish();
      std::uint64_t s = 0;
      for (int i = 0; i < 8; ++i) s |= static_cast<std::uint64_t>(d[i]) << (8 * i);
      auto gen = at::make_generator<at::CPUGeneratorImpl>(s);
      new_w[row].copy_(at::normal(0.0, 0.01, new_w[row].sizes(), gen));
      new_b[row].fill_(prior_bias);
    }
  }
  out->train(detector->is_training());
  return out;
}

torch::Tensor pad_to_multiple(const torch::Tensor& images, int multiple) {
  const auto h = images.size(2);
  const auto w = images.size(3);
  const auto ph = (multiple - h % multiple) % multiple;
  const auto pw = (multiple - w % multiple) % multiple;
  if (ph == 0 && pw == 0) return images;
  return torch::constant_pad_nd(images, {0, pw, 0, ph}, 0.0);
}

torch::Tensor level_locations(std::int64_t height, std::int64_t width, int stride, torch::ScalarType dtype) {
  auto opts = torch::TensorOptions().dtype(dtype);
  auto xs = torch::arange(width, opts) * stride + stride / 2;
  auto ys = torch::arange(height, opts) * stride + stride / 2;
  auto grid = torch::meshgrid({ys, xs}, "ij");
  return torch::stack({grid[1].reshape(-1), grid[0].reshape(-1)}, 1);
}

namespace {

void hash_tensor(Sha256& h, const std::string& name, const torch::Tensor& t) {
  h.update(name);
  auto c = t.detach().contiguous().cpu();
  for (auto s : c.sizes()) h.update_u64(static_cast<std::uint64_t>(s));
  h.update(std::span(static_cast<const std::byte*>(c.data_ptr()), c.numel() * c.element_size()));
}

}  // namespace

std::string parameter_digest(const Detector& detector) {
  std::map<std::string, torch::Tensor> all;
  for (const auto& item : detector->named_parameters()) all[item.key()] = item.value();
  for (const auto& item : detector->named_buffers()) all["buffer:" + item.key()] = item.value();
  Sha256 h;
  for (const auto& [name, t] : all) hash_tensor(h, name, t);
  return to_hex(h.finish());
}

std::string part_digest(const Detector& detector, Part part) {
  std::map<std::string, torch::Tensor> all;
  for (const auto& item : detector->named_parameters()) {
    if (part_of(item.key()) == part) all[item.key()] = item.value();
  }
  for (const auto& item : detector->named_buffers()) {
    if (part_of(item.key()) == part) all["buffer:" + item.key()] = item.value();
  }
  Sha256 h;
  for (const auto& [name, t] : all) hash_tensor(h, name, t);
  return to_hex(h.finish());
}

}  // namespace diredi
