#include "diredi/detection_loss.hpp"

#include "diredi/error.hpp"

namespace diredi {

namespace F = torch::nn::functional;

torch::Tensor giou_loss(const torch::Tensor& pred, const torch::Tensor& target) {
  auto pl = pred.select(1, 0), pt = pred.select(1, 1), pr = pred.select(1, 2), pb = pred.select(1, 3);
  auto tl = target.select(1, 0), tt = target.select(1, 1), tr = target.select(1, 2), tb = target.select(1, 3);
  auto pred_area = (pl + pr) * (pt + pb);
  auto target_area = (tl + tr) * (tt + tb);
  auto inter = (torch::min(pl, tl) + torch::min(pr, tr)) * (torch::min(pt, tt) + torch::min(pb, tb));
  auto uni = pred_area + target_area - inter;
  auto enclose = (torch::max(pl, tl) + torch::max(pr, tr)) * (torch::max(pt, tt) + torch::max(pb, tb));
  auto iou = inter / uni.clamp_min(1e-12);
  auto giou = iou - (enclose - uni) / enclose.clamp_min(1e-12);
  return 1.0 - giou;
}

DetectionLoss detection_loss(const HeadOutputs& outputs, const TargetMaps& targets,
                             const DetectionLossConfig& config) {
  const auto levels = outputs.class_logits.size();
  if (targets.levels.size() != levels) throw ShapeError("detection_loss: level count mismatch");

  std::vector<torch::Tensor> cls, ctr, reg, t_lab, t_reg, t_ctr;
  for (std::size_t l = 0; l < levels; ++l) {
    const auto& logits = outputs.class_logits[l];
    const auto k = logits.size(1);
    if (targets.levels[l].labels.sizes() != torch::IntArrayRef{logits.size(0), logits.size(2), logits.size(3)}) {
      throw ShapeError("detection_loss: target shape disagrees with level " + std::to_string(l));
    }
    cls.push_back(logits.permute({0, 2, 3, 1}).reshape({-1, k}));
    ctr.push_back(outputs.centerness_logits[l].reshape({-1}));
    reg.push_back(outputs.box_regression[l].permute({0, 2, 3, 1}).reshape({-1, 4}));
    t_lab.push_back(targets.levels[l].labels.reshape({-1}));
    t_reg.push_back(targets.levels[l].regression.permute({0, 2, 3, 1}).reshape({-1, 4}));
    t_ctr.push_back(targets.levels[l].centerness.reshape({-1}));
  }
  auto logits = torch::cat(cls);
  auto labels = torch::cat(t_lab);
  auto pos = labels.ne(kBackground);
  const auto num_pos = pos.sum().item<std::int64_t>();

  auto onehot = torch::zeros_like(logits);
  if (num_pos > 0) {
    auto pos_idx = pos.nonzero().squeeze(1);
    onehot.index_put_({pos_idx, labels.index({pos_idx})}, 1.0);
  }
  auto p = torch::sigmoid(logits);
  auto ce = F::binary_cross_entropy_with_logits(logits, onehot,
                                                F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kNone));
  auto p_t = p * onehot + (1 - p) * (1 - onehot);
  auto alpha_t = config.focal_alpha * onehot + (1 - config.focal_alpha) * (1 - onehot);
  auto focal = alpha_t * ce * torch::pow(1 - p_t, config.focal_gamma);

  DetectionLoss out;
  out.num_positive = num_pos;
  out.classification = focal.sum() / static_cast<double>(std::max<std::int64_t>(num_pos, 1));
  if (num_pos > 0) {
    auto pos_idx = pos.nonzero().squeeze(1);
    auto pred_reg = torch::cat(reg).index({pos_idx});
    auto tgt_reg = torch::cat(t_reg).index({pos_idx});
    auto tgt_ctr = torch::cat(t_ctr).index({pos_idx});
    out.box = giou_loss(pred_reg, tgt_reg).mean();
    out.centerness = F::binary_cross_entropy_with_logits(torch::cat(ctr).index({pos_idx}), tgt_ctr);
  } else {
    out.box = (torch::cat(reg).sum() * 0.0);
    out.centerness = (torch::cat(ctr).sum() * 0.0);
  }
  for (const auto* term : {&out.classification, &out.box, &out.centerness}) {
    if (!torch::isfinite(*term).item<bool>()) throw NumericError("detection_loss: non-finite loss term");
  }
  return out;
}

}  // namespace diredi
