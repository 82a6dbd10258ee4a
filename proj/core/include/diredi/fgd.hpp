#pragma once

#include <torch/torch.h>

#include <nlohmann/json.hpp>
#include <utility>
#include <vector>

#include "diredi/annotation.hpp"
#include "diredi/detector.hpp"

namespace diredi {

// Weights of the focal-and-global feature imitation loss.
struct FGDConfig {
  double sigma_fg = 1.6e-3;     // foreground imitation
  double beta_bg = 8e-4;        // background imitation
  double gamma_attn = 8e-4;     // teacher/student attention agreement
  double lambda_global = 8e-6;  // global (context) relation term
  double temperature = 0.5;     // attention softmax temperature

  void validate() const;
  nlohmann::json to_json() const;
  static FGDConfig from_json(const nlohmann::json& j);
  static FGDConfig from_json(const nlohmann::json& j, const FGDConfig& defaults);
};

// Foreground/background masks for one pyramid level. All tensors are
// [H, W] for a single image or [B, H, W] for a batch.
//
//   binary          M   1 where a location falls inside a ground-truth box
//   scale           S   1 / (footprint cells of the smallest covering box) on M
//   inverse_binary  M^  1 - M
//   inverse_scale   S^  1 / (number of background cells) on M^
struct FGDMasks {
  torch::Tensor binary;
  torch::Tensor scale;
  torch::Tensor inverse_binary;
  torch::Tensor inverse_scale;
};

// A location (i, j) is foreground when its cell centre ((j+.5)s, (i+.5)s)
// lies inside the box. Boxes whose footprint contains no cell centre claim
// the cell holding their own centre.
FGDMasks build_masks(const Annotation& annotation, std::pair<std::int64_t, std::int64_t> level_shape, int stride);
FGDMasks build_masks(const std::vector<Annotation>& annotations, std::pair<std::int64_t, std::int64_t> level_shape,
                     int stride);

// A^s = H*W * softmax over pixels of mean_c(|F|) / T. [C,H,W] -> [H,W]; [B,C,H,W] -> [B,H,W].
torch::Tensor spatial_attention(const torch::Tensor& feature, double temperature);
// A^c = C * softmax over channels of mean_hw(|F|) / T. [C,H,W] -> [C]; [B,C,H,W] -> [B,C].
torch::Tensor channel_attention(const torch::Tensor& feature, double temperature);

struct AttentionMaps {
  torch::Tensor spatial;
  torch::Tensor channel;
};
AttentionMaps attention_maps(const torch::Tensor& feature, double temperature);

struct FocalTerms {
  torch::Tensor foreground;  // sigma-weighted
  torch::Tensor background;  // beta-weighted
  torch::Tensor attention;   // gamma-weighted

  torch::Tensor total() const { return foreground + background + attention; }
};

// Focal distillation on batched level features [B, C, H, W]. The teacher is
// detached; sums run over channels and locations and are averaged over the
// batch. The attention term is the per-level mean absolute difference of
// spatial and of channel attention.
FocalTerms focal_distill_loss(const torch::Tensor& teacher, const torch::Tensor& student, const FGDMasks& masks,
                              const FGDConfig& config);

// Global context block:
//   G(F) = F + W2(ReLU(LN(W1(sum_j softmax_j(Wk F) F_j))))
class GcBlockImpl : public torch::nn::Module {
 public:
  explicit GcBlockImpl(int channels);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d context{nullptr};     // Wk: C -> 1
  torch::nn::Conv2d transform1{nullptr};  // W1: C -> C/2
  torch::nn::LayerNorm norm{nullptr};
  torch::nn::Conv2d transform2{nullptr};  // W2: C/2 -> C, zero-initialised
};
TORCH_MODULE(GcBlock);

torch::Tensor gc_block(const torch::Tensor& feature, GcBlock& params);

// lambda * sum (G(F_T) - G(F_S))^2, averaged over the batch. One shared block
// transforms both branches; the teacher input is detached.
torch::Tensor global_distill_loss(const torch::Tensor& teacher, const torch::Tensor& student, GcBlock& params,
                                  double lambda_global);

// Auxiliary trainable state of one distillation run: one GcBlock per level
// and, when neck widths differ, a 1x1 adaptor on the student side. Discarded
// after training; never serialised into checkpoints or packets.
class FeatureDistillerImpl : public torch::nn::Module {
 public:
  FeatureDistillerImpl(std::size_t num_levels, int teacher_channels, int student_channels);

  GcBlock& gc(std::size_t level) { return blocks_[level]; }
  torch::Tensor adapt(std::size_t level, const torch::Tensor& student);
  bool has_adaptor() const { return !adaptors_.empty(); }

 private:
  std::vector<GcBlock> blocks_;
  std::vector<torch::nn::Conv2d> adaptors_;
};
TORCH_MODULE(FeatureDistiller);

struct FeatureDistillLoss {
  torch::Tensor foreground;
  torch::Tensor background;
  torch::Tensor attention;
  torch::Tensor global;

  torch::Tensor focal() const { return foreground + background + attention; }
  torch::Tensor total() const { return focal() + global; }
};

// Sum over pyramid levels of focal + global distillation.
FeatureDistillLoss feature_distill_loss(const FeaturePyramid& teacher, const FeaturePyramid& student,
                                        const std::vector<Annotation>& annotations, const FGDConfig& config,
                                        FeatureDistiller& distiller);

}  // namespace diredi
