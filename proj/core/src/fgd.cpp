#include "diredi/fgd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "diredi/error.hpp"

namespace diredi {

void FGDConfig::validate() const {
  for (double v : {sigma_fg, beta_bg, gamma_attn, lambda_global}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("FGD weights must be finite and non-negative");
  }
  if (!(temperature > 0.0)) throw ConfigError("FGD temperature must be positive");
}

nlohmann::json FGDConfig::to_json() const {
  return {{"sigma_fg", sigma_fg},
          {"beta_bg", beta_bg},
          {"gamma_attn", gamma_attn},
          {"lambda_global", lambda_global},
          {"temperature", temperature}};
}

FGDConfig FGDConfig::from_json(const nlohmann::json& j) { return from_json(j, FGDConfig{}); }

FGDConfig FGDConfig::from_json(const nlohmann::json& j, const FGDConfig& defaults) {
  FGDConfig c = defaults;
  c.sigma_fg = j.value("sigma_fg", c.sigma_fg);
  c.beta_bg = j.value("beta_bg", c.beta_bg);
  c.gamma_attn = j.value("gamma_attn", c.gamma_attn);
  c.lambda_global = j.value("lambda_global", c.lambda_global);
  c.temperature = j.value("temperature", c.temperature);
  c.validate();
  return c;
}

// ---------------------------------------------------------------- masks

namespace {

struct Footprint {
  std::int64_t i0, i1, j0, j1;  // inclusive
  std::int64_t cells() const { return (i1 - i0 + 1) * (j1 - j0 + 1); }
};

std::pair<std::int64_t, std::int64_t> centre_span(float lo, float hi, float stride, std::int64_t n) {
  auto a = static_cast<std::int64_t>(std::ceil(lo / stride - 0.5f));
  auto b = static_cast<std::int64_t>(std::floor(hi / stride - 0.5f));
  a = std::max<std::int64_t>(a, 0);
  b = std::min<std::int64_t>(b, n - 1);
  if (a > b) {
    const auto c = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor((lo + hi) / 2.f / stride)), 0, n - 1);
    return {c, c};
  }
  return {a, b};
}

}  // namespace

FGDMasks build_masks(const Annotation& annotation, std::pair<std::int64_t, std::int64_t> level_shape, int stride) {
  const auto [h, w] = level_shape;
  auto binary = torch::zeros({h, w});
  auto scale = torch::zeros({h, w});
  auto area = torch::full({h, w}, std::numeric_limits<float>::infinity());
  auto bin_a = binary.accessor<float, 2>();
  auto scl_a = scale.accessor<float, 2>();
  auto area_a = area.accessor<float, 2>();
  const auto s = static_cast<float>(stride);
  for (const auto& box : annotation.boxes) {
    const auto [i0, i1] = centre_span(box.y1, box.y2, s, h);
    const auto [j0, j1] = centre_span(box.x1, box.x2, s, w);
    const Footprint fp{i0, i1, j0, j1};
    const float value = 1.f / static_cast<float>(fp.cells());
    const float box_area = box.area();
    for (auto i = fp.i0; i <= fp.i1; ++i) {
      for (auto j = fp.j0; j <= fp.j1; ++j) {
        bin_a[i][j] = 1.f;
        if (box_area < area_a[i][j]) {
          area_a[i][j] = box_area;
          scl_a[i][j] = value;
        }
      }
    }
  }
  FGDMasks m;
  m.binary = binary;
  m.scale = scale;
  m.inverse_binary = 1.f - binary;
  const auto n_bg = m.inverse_binary.sum().item<float>();
  m.inverse_scale = n_bg > 0.f ? m.inverse_binary / n_bg : torch::zeros({h, w});
  return m;
}

FGDMasks build_masks(const std::vector<Annotation>& annotations, std::pair<std::int64_t, std::int64_t> level_shape,
                     int stride) {
  std::vector<torch::Tensor> b, s, ib, is;
  for (const auto& ann : annotations) {
    auto m = build_masks(ann, level_shape, stride);
    b.push_back(m.binary);
    s.push_back(m.scale);
    ib.push_back(m.inverse_binary);
    is.push_back(m.inverse_scale);
  }
  return {torch::stack(b), torch::stack(s), torch::stack(ib), torch::stack(is)};
}

// ---------------------------------------------------------------- attention

torch::Tensor spatial_attention(const torch::Tensor& feature, double temperature) {
  const bool batched = feature.dim() == 4;
  auto f = batched ? feature : feature.unsqueeze(0);
  const auto n = f.size(0), h = f.size(2), w = f.size(3);
  auto map = f.abs().mean(1).reshape({n, h * w});
  auto att = (static_cast<double>(h * w) * torch::softmax(map / temperature, 1)).reshape({n, h, w});
  return batched ? att : att.squeeze(0);
}

torch::Tensor channel_attention(const torch::Tensor& feature, double temperature) {
  const bool batched = feature.dim() == 4;
  auto f = batched ? feature : feature.unsqueeze(0);
  const auto c = f.size(1);
  auto map = f.abs().mean({2, 3});
  auto att = static_cast<double>(c) * torch::softmax(map / temperature, 1);
  return batched ? att : att.squeeze(0);
}

AttentionMaps attention_maps(const torch::Tensor& feature, double temperature) {
  return {spatial_attention(feature, temperature), channel_attention(feature, temperature)};
}

// ---------------------------------------------------------------- focal

FocalTerms focal_distill_loss(const torch::Tensor& teacher, const torch::Tensor& student, const FGDMasks& masks,
                              const FGDConfig& config) {
  if (teacher.sizes() != student.sizes()) {
    throw ShapeError("focal_distill_loss: teacher " + c10::str(teacher.sizes()) + " vs student " +
                     c10::str(student.sizes()) + " (insert an adaptor)");
  }
  if (teacher.dim() != 4) throw ShapeError("focal_distill_loss: expected [B, C, H, W] features");
  const auto n = static_cast<double>(teacher.size(0));
  auto t = teacher.detach();
  const auto opts = student.options();

  auto att_t = attention_maps(t, config.temperature);
  auto att_s = attention_maps(student, config.temperature);

  // [B, 1, H, W] * [B, C, 1, 1]
  auto weight = att_t.spatial.unsqueeze(1) * att_t.channel.unsqueeze(2).unsqueeze(3);
  auto sq = (t - student).pow(2) * weight;
  auto fg_mask = (masks.binary * masks.scale).to(opts).unsqueeze(1);
  auto bg_mask = (masks.inverse_binary * masks.inverse_scale).to(opts).unsqueeze(1);

  FocalTerms out;
  out.foreground = config.sigma_fg * (sq * fg_mask).sum() / n;
  out.background = config.beta_bg * (sq * bg_mask).sum() / n;
  out.attention = config.gamma_attn * ((att_t.spatial - att_s.spatial).abs().mean() +
                                       (att_t.channel - att_s.channel).abs().mean());
  return out;
}

// ---------------------------------------------------------------- global

GcBlockImpl::GcBlockImpl(int channels) {
  const int hidden = std::max(1, channels / 2);
  context = register_module("context", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, 1, 1)));
  transform1 = register_module("transform1", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, hidden, 1)));
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({hidden, 1, 1})));
  transform2 = register_module("transform2", torch::nn::Conv2d(torch::nn::Conv2dOptions(hidden, channels, 1)));
  torch::NoGradGuard guard;
  torch::nn::init::kaiming_normal_(context->weight, 0.0, torch::kFanIn, torch::kReLU);
  context->bias.zero_();
  transform2->weight.zero_();
  transform2->bias.zero_();
}

torch::Tensor GcBlockImpl::forward(const torch::Tensor& x) {
  const auto n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  auto logits = context->forward(x).reshape({n, 1, h * w});
  auto weights = torch::softmax(logits, 2);                         // [N, 1, HW]
  auto pooled = torch::bmm(x.reshape({n, c, h * w}), weights.transpose(1, 2));  // [N, C, 1]
  auto ctx = pooled.reshape({n, c, 1, 1});
  auto y = transform2->forward(torch::relu(norm->forward(transform1->forward(ctx))));
  return x + y;
}

torch::Tensor gc_block(const torch::Tensor& feature, GcBlock& params) {
  if (feature.dim() == 3) return params->forward(feature.unsqueeze(0)).squeeze(0);
  return params->forward(feature);
}

torch::Tensor global_distill_loss(const torch::Tensor& teacher, const torch::Tensor& student, GcBlock& params,
                                  double lambda_global) {
  if (teacher.sizes() != student.sizes()) throw ShapeError("global_distill_loss: feature shape mismatch");
  const bool batched = teacher.dim() == 4;
  const double n = batched ? static_cast<double>(teacher.size(0)) : 1.0;
  auto gt = gc_block(teacher.detach(), params);
  auto gs = gc_block(student, params);
  return lambda_global * (gt - gs).pow(2).sum() / n;
}

// ---------------------------------------------------------------- combined

FeatureDistillerImpl::FeatureDistillerImpl(std::size_t num_levels, int teacher_channels, int student_channels) {
  for (std::size_t l = 0; l < num_levels; ++l) {
    blocks_.push_back(register_module("gc" + std::to_string(l), GcBlock(teacher_channels)));
    if (teacher_channels != student_channels) {
      adaptors_.push_back(register_module(
          "adaptor" + std::to_string(l),
          torch::nn::Conv2d(torch::nn::Conv2dOptions(student_channels, teacher_channels, 1))));
    }
  }
}

torch::Tensor FeatureDistillerImpl::adapt(std::size_t level, const torch::Tensor& student) {
  if (adaptors_.empty()) return student;
  return adaptors_.at(level)->forward(student);
}

FeatureDistillLoss feature_distill_loss(const FeaturePyramid& teacher, const FeaturePyramid& student,
                                        const std::vector<Annotation>& annotations, const FGDConfig& config,
                                        FeatureDistiller& distiller) {
  if (teacher.size() != student.size()) {
    throw ShapeError("feature_distill_loss: teacher has " + std::to_string(teacher.size()) +
                     " levels, student has " + std::to_string(student.size()));
  }
  if (teacher.size() == 0) throw ShapeError("feature_distill_loss: empty pyramid");
  const auto opts = student.levels[0].options();
  FeatureDistillLoss out{torch::zeros({}, opts), torch::zeros({}, opts), torch::zeros({}, opts),
                         torch::zeros({}, opts)};
  for (std::size_t l = 0; l < teacher.size(); ++l) {
    const auto& ft = teacher.levels[l];
    auto fs = distiller->adapt(l, student.levels[l]);
    if (ft.sizes() != fs.sizes()) {
      throw ShapeError("feature_distill_loss: level " + std::to_string(l) + " shape mismatch");
    }
    auto masks = build_masks(annotations, {ft.size(2), ft.size(3)}, teacher.strides.at(l));
    auto focal = focal_distill_loss(ft, fs, masks, config);
    out.foreground = out.foreground + focal.foreground;
    out.background = out.background + focal.background;
    out.attention = out.attention + focal.attention;
    out.global = out.global + global_distill_loss(ft, fs, distiller->gc(l), config.lambda_global);
  }
  return out;
}

}  // namespace diredi
