#include <gtest/gtest.h>

#include "diredi/error.hpp"
#include "diredi/weights.hpp"
#include "test_util.hpp"

namespace diredi {
namespace {

const std::vector<std::string> kCats{"disc", "square", "triangle"};

Detector perturbed(const Detector& base, std::uint64_t seed) {
  auto out = clone_detector(base);
  torch::manual_seed(seed);
  torch::NoGradGuard guard;
  for (auto part : {Part::neck, Part::head}) {
    for (auto& [name, p] : out->named_part_parameters(part)) p.add_(torch::randn_like(p) * 0.1);
  }
  return out;
}

TEST(WeightSubstitution, ReproducesSecondTutorExactly) {
  for (int trial = 0; trial < 20; ++trial) {
    const auto seed = static_cast<std::uint64_t>(trial);
    auto t1 = build_detector(DetectorConfig::preset(Tier::toy, kCats), seed);
    auto t2 = perturbed(t1, 1000 + seed);
    const auto delta = compute_delta(extract_weights(t1, {Part::neck, Part::head}),
                                     extract_weights(t2, {Part::neck, Part::head}), 1.0);
    const auto updated = apply_delta(t1, delta, 1.0);
    for (auto part : {Part::neck, Part::head}) {
      const auto got = updated->named_part_parameters(part);
      const auto want = t2->named_part_parameters(part);
      ASSERT_EQ(got.size(), want.size());
      for (std::size_t i = 0; i < got.size(); ++i) {
        EXPECT_TRUE(testing::bit_equal(got[i].second, want[i].second)) << "trial " << trial << " " << got[i].first;
      }
    }
    EXPECT_EQ(part_digest(updated, Part::backbone), part_digest(t1, Part::backbone)) << "trial " << trial;
    EXPECT_EQ(part_digest(updated, Part::neck), part_digest(t2, Part::neck));
    EXPECT_EQ(part_digest(updated, Part::head), part_digest(t2, Part::head));
  }
}

TEST(WeightSubstitution, InputModelIsUntouched) {
  auto t1 = build_detector(testing::tiny_config(kCats), 3);
  const auto before = parameter_digest(t1);
  const auto delta = compute_delta(extract_weights(t1, {Part::head}), extract_weights(perturbed(t1, 4), {Part::head}), 1.0);
  apply_delta(t1, delta, 0.5);
  EXPECT_EQ(parameter_digest(t1), before);
}

TEST(WeightSubstitution, ScalesWithGammaAndDelta) {
  auto t1 = build_detector(testing::tiny_config(kCats), 5);
  auto t2 = perturbed(t1, 6);
  const auto w1 = extract_weights(t1, {Part::head});
  const auto w2 = extract_weights(t2, {Part::head});
  const auto delta = compute_delta(w1, w2, 2.0);
  for (const auto& e : delta.entries()) {
    EXPECT_TRUE(torch::allclose(e.value, 2.0 * w2.find(e.name)->value - w1.find(e.name)->value, 0, 1e-12));
  }
  const auto half = apply_delta(t1, compute_delta(w1, w2, 1.0), 0.5);
  const auto wh = extract_weights(half, {Part::head});
  for (const auto& e : wh.entries()) {
    const auto want = w1.find(e.name)->value + 0.5 * (w2.find(e.name)->value - w1.find(e.name)->value);
    EXPECT_TRUE(torch::allclose(e.value, want, 0, 1e-6)) << e.name;
  }
}

TEST(WeightSet, RefusesBackbone) {
  auto m = build_detector(testing::tiny_config(kCats), 0);
  EXPECT_THROW(extract_weights(m, {Part::backbone, Part::head}), ConfigError);
  WeightSet w;
  EXPECT_THROW(w.insert("backbone.stem.weight", torch::zeros({1})), ConfigError);
  w.insert("head.x", torch::zeros({1}));
  EXPECT_THROW(w.insert("head.x", torch::zeros({1})), ConfigError);
}

TEST(WeightSet, StoresSortedDoubleCopies) {
  auto m = build_detector(testing::tiny_config(kCats), 0);
  const auto w = extract_weights(m, {Part::neck, Part::head});
  const auto names = w.names();
  EXPECT_TRUE(std::is_sorted(names.begin(), names.end()));
  for (const auto& e : w.entries()) EXPECT_EQ(e.value.scalar_type(), torch::kFloat64);
  EXPECT_GT(w.norm(), 0.0);
}

TEST(ComputeDelta, MisalignedSetsListOffenders) {
  auto a = build_detector(testing::tiny_config(kCats), 0);
  auto b = build_detector(testing::tiny_config({"disc", "square"}), 0);
  try {
    compute_delta(extract_weights(a, {Part::head}), extract_weights(b, {Part::head}), 1.0);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("cls_logits"), std::string::npos) << e.what();
  }
}

TEST(ApplyDelta, DigestMismatchIsRejected) {
  auto a = build_detector(testing::tiny_config(kCats), 0);
  auto b = build_detector(testing::tiny_config({"disc", "square"}), 0);
  const auto delta = compute_delta(extract_weights(b, {Part::head}), extract_weights(b, {Part::head}), 1.0);
  EXPECT_THROW(apply_delta(a, delta, 1.0), DigestMismatchError);
  EXPECT_THROW(apply_delta(a, WeightSet{}, 1.0), DigestMismatchError);
}

TEST(ArchitectureDigest, DependsOnNamesAndShapesOnly) {
  auto a = build_detector(testing::tiny_config(kCats), 0);
  auto b = build_detector(testing::tiny_config(kCats), 99);
  auto c = build_detector(testing::tiny_config({"x", "y"}), 0);
  EXPECT_EQ(architecture_digest(a), architecture_digest(b));
  EXPECT_NE(architecture_digest(a), architecture_digest(c));
}

TEST(AlignToCategories, AbsentRowsAreSilent) {
  auto m = build_detector(testing::tiny_config({"disc", "square"}), 1);
  auto aligned = align_to_categories(m, {"disc", "novel", "square"});
  auto& w = aligned->head()->cls_logits()->weight;
  auto& b = aligned->head()->cls_logits()->bias;
  EXPECT_EQ(w[1].abs().sum().item<float>(), 0.f);
  EXPECT_EQ(b[1].item<float>(), static_cast<float>(kAbsentClassBias));
  auto& w0 = m->head()->cls_logits()->weight;
  EXPECT_TRUE(torch::equal(w[0], w0[0]));
  EXPECT_TRUE(torch::equal(w[2], w0[1]));
  EXPECT_EQ(aligned->config().categories, (std::vector<std::string>{"disc", "novel", "square"}));
}

TEST(RenameCategories, KeepsWeights) {
  auto m = build_detector(testing::tiny_config({"novel-0", "disc"}), 1);
  const auto r = rename_categories(m, {"star", "disc"});
  EXPECT_EQ(r->config().categories, (std::vector<std::string>{"star", "disc"}));
  EXPECT_EQ(parameter_digest(r), parameter_digest(m));
  EXPECT_THROW(rename_categories(m, {"a"}), ShapeError);
}

}  // namespace
}  // namespace diredi
