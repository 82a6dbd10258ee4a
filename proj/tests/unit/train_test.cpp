#include <gtest/gtest.h>

#include "diredi/error.hpp"
#include "diredi/train.hpp"
#include "test_util.hpp"

namespace diredi {
namespace {

const std::vector<std::string> kCats{"disc", "square", "bar"};

TrainConfig quick(int epochs = 1) {
  TrainConfig c;
  c.max_epochs = epochs;
  c.batch_size = 4;
  c.learning_rate = 0.005;
  c.seed = 3;
  return c;
}

TEST(TrainDirect, RunsAndLeavesInputUntouched) {
  const auto ds = testing::tiny_dataset(8, kCats, 1);
  auto m = build_detector(testing::tiny_config(kCats), 0);
  const auto before = parameter_digest(m);
  auto [trained, rec] = train_direct(m, ds, quick(2));
  EXPECT_EQ(parameter_digest(m), before);
  EXPECT_NE(parameter_digest(trained), before);
  ASSERT_EQ(rec.epochs.size(), 2u);
  EXPECT_EQ(rec.epochs[0].steps, 2);
  EXPECT_TRUE(std::isfinite(rec.epochs[1].total));
  EXPECT_EQ(rec.final_parameter_digest, parameter_digest(trained));
  EXPECT_EQ(rec.dataset_digest, dataset_fingerprint(ds));
}

TEST(TrainDirect, DeterministicUnderSeed) {
  const auto ds = testing::tiny_dataset(8, kCats, 1);
  auto m = build_detector(testing::tiny_config(kCats), 0);
  const auto a = train_direct(m, ds, quick()).first;
  const auto b = train_direct(m, ds, quick()).first;
  EXPECT_EQ(parameter_digest(a), parameter_digest(b));
}

TEST(TrainDirect, FrozenBackboneStaysFixed) {
  const auto ds = testing::tiny_dataset(8, kCats, 1);
  auto m = build_detector(testing::tiny_config(kCats), 0);
  auto cfg = quick();
  cfg.freeze_backbone = true;
  const auto t = train_direct(m, ds, cfg).first;
  EXPECT_EQ(part_digest(t, Part::backbone), part_digest(m, Part::backbone));
  EXPECT_NE(part_digest(t, Part::head), part_digest(m, Part::head));
}

TEST(TrainConfigTest, ValidationAndJson) {
  auto c = quick();
  EXPECT_EQ(TrainConfig::from_json(c.to_json()).digest(), c.digest());
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = quick();
  c.learning_rate = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Distill, TeacherIsBitIdentical) {
  const auto ds = testing::tiny_dataset(8, kCats, 2);
  auto teacher = build_detector(testing::tiny_config(kCats, 16), 1);
  auto student = build_detector(testing::tiny_config(kCats, 8), 2);
  const auto before = parameter_digest(teacher);
  auto [out, rec] = distill(teacher, student, ds, FGDConfig{}, quick());
  EXPECT_EQ(parameter_digest(teacher), before);
  EXPECT_NE(parameter_digest(out), parameter_digest(student));
  EXPECT_TRUE(rec.epochs[0].components.contains("fgd_fg"));
}

TEST(Distill, RejectsUncoveredCategories) {
  const auto ds = testing::tiny_dataset(8, {"disc", "star"}, 2);
  auto teacher = build_detector(testing::tiny_config({"disc"}), 1);
  auto student = build_detector(testing::tiny_config({"disc", "star"}), 2);
  EXPECT_THROW(distill(teacher, student, ds, FGDConfig{}, quick()), ConfigError);
}

TEST(ReverseDistill, FeatureOnlyLeavesHeadUntouched) {
  const auto ds = testing::tiny_dataset(8, kCats, 3);
  auto edge = build_detector(testing::tiny_config({"disc", "square"}, 8), 1);
  auto tutor = build_detector(testing::tiny_config(kCats, 16), 2);
  auto [out, rec] = reverse_distill(edge, tutor, ds, FGDConfig{}, RDConfig{1.0, 0.0}, quick());
  EXPECT_EQ(part_digest(out, Part::head), part_digest(tutor, Part::head));
  EXPECT_NE(part_digest(out, Part::neck), part_digest(tutor, Part::neck));
  EXPECT_FALSE(rec.warnings.empty());  // "bar" is unknown to the edge teacher
}

TEST(ReverseDistill, StudentMustNotBeSmaller) {
  const auto ds = testing::tiny_dataset(4, kCats, 3);
  auto big = build_detector(testing::tiny_config(kCats, 16), 1);
  auto small = build_detector(testing::tiny_config(kCats, 8), 2);
  EXPECT_THROW(reverse_distill(big, small, ds, FGDConfig{}, RDConfig{}, quick()), ConfigError);
}

TEST(Redistill, ReshapesHeadToCategories) {
  const auto ds = testing::tiny_dataset(8, {"disc", "star"}, 4);
  auto tutor = build_detector(testing::tiny_config({"disc", "square", "star"}, 16), 1);
  auto edge = build_detector(testing::tiny_config({"disc", "square"}, 8), 2);
  auto [out, rec] = redistill_finetune(tutor, edge, ds, {"disc", "star"}, FGDConfig{}, quick(), 9);
  EXPECT_EQ(out->config().categories, (std::vector<std::string>{"disc", "star"}));
  EXPECT_THROW(redistill_finetune(tutor, edge, ds, {"disc", "chevron"}, FGDConfig{}, quick(), 9), ConfigError);
}

}  // namespace
}  // namespace diredi
