#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "diredi/checkpoint.hpp"
#include "diredi/error.hpp"
#include "diredi/tensor_archive.hpp"
#include "test_util.hpp"

namespace diredi {
namespace {

const std::vector<std::string> kCats{"disc", "square", "star"};

TEST(Detector, OutputShapes) {
  auto m = build_detector(testing::tiny_config(kCats), 0);
  m->eval();
  const auto out = m->forward(torch::randn({2, 3, 64, 64}));
  ASSERT_EQ(out.pyramid.size(), 3u);
  const std::int64_t sizes[] = {8, 4, 2};
  for (std::size_t l = 0; l < 3; ++l) {
    EXPECT_EQ(out.pyramid.levels[l].sizes(), (torch::IntArrayRef{2, 8, sizes[l], sizes[l]}));
    EXPECT_EQ(out.head.class_logits[l].sizes(), (torch::IntArrayRef{2, 3, sizes[l], sizes[l]}));
    EXPECT_EQ(out.head.centerness_logits[l].size(1), 1);
    EXPECT_EQ(out.head.box_regression[l].size(1), 4);
    EXPECT_GT(out.head.box_regression[l].min().item<float>(), 0.f);
  }
}

TEST(Detector, PadsOddSizes) {
  auto m = build_detector(testing::tiny_config(kCats), 0);
  m->eval();
  const auto out = m->forward(torch::randn({1, 3, 50, 70}));
  EXPECT_EQ(out.pyramid.levels[0].size(2), 8);
  EXPECT_EQ(out.pyramid.levels[0].size(3), 12);
}

TEST(Detector, SeededConstructionIsDeterministic) {
  const auto cfg = testing::tiny_config(kCats);
  EXPECT_EQ(parameter_digest(build_detector(cfg, 4)), parameter_digest(build_detector(cfg, 4)));
  EXPECT_NE(parameter_digest(build_detector(cfg, 4)), parameter_digest(build_detector(cfg, 5)));
}

TEST(Detector, TiersGrowInSize) {
  const auto count = [](Tier t) { return build_detector(DetectorConfig::preset(t, kCats), 0)->parameter_count(); };
  EXPECT_GT(count(Tier::large), count(Tier::tutor));
  EXPECT_GT(count(Tier::tutor), count(Tier::edge));
}

TEST(Detector, EveryParameterBelongsToOnePart) {
  auto m = build_detector(testing::tiny_config(kCats), 0);
  std::size_t total = 0;
  for (auto part : {Part::backbone, Part::neck, Part::head}) {
    for (const auto& [name, p] : m->named_part_parameters(part)) {
      EXPECT_EQ(part_of(name), part) << name;
      ++total;
    }
  }
  EXPECT_EQ(total, m->parameters().size());
  EXPECT_THROW(part_of("classifier.weight"), ConfigError);
}

TEST(Detector, ConfigValidation) {
  auto c = testing::tiny_config(kCats);
  c.num_classes = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = testing::tiny_config(kCats);
  c.scale_bounds = {0.f, 16.f};
  EXPECT_THROW(c.validate(), ConfigError);
  c = testing::tiny_config(kCats);
  EXPECT_EQ(DetectorConfig::from_json(c.to_json()).to_json(), c.to_json());
}

TEST(WithCategories, CopiesRetainedRowsByName) {
  auto m = build_detector(testing::tiny_config(kCats), 1);
  auto n = with_categories(m, {"star", "chevron", "disc"}, 7);
  auto& w = m->head()->cls_logits()->weight;
  auto& nw = n->head()->cls_logits()->weight;
  EXPECT_TRUE(torch::equal(nw[0], w[2]));
  EXPECT_TRUE(torch::equal(nw[2], w[0]));
  EXPECT_EQ(part_digest(n, Part::backbone), part_digest(m, Part::backbone));
  EXPECT_EQ(part_digest(n, Part::neck), part_digest(m, Part::neck));
  // Fresh rows are a function of the seed and the name.
  auto again = with_categories(m, {"chevron"}, 7);
  EXPECT_TRUE(torch::equal(again->head()->cls_logits()->weight[0], nw[1]));
}

TEST(CloneDetector, IsIndependent) {
  auto m = build_detector(testing::tiny_config(kCats), 1);
  auto c = clone_detector(m);
  const auto before = parameter_digest(m);
  {
    torch::NoGradGuard g;
    c->head()->cls_logits()->bias.add_(1.0);
  }
  EXPECT_EQ(parameter_digest(m), before);
  EXPECT_NE(parameter_digest(c), before);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto m = build_detector(testing::tiny_config(kCats), 2);
  m->provenance().push_back({{"procedure", "train"}});
  testing::TempDir dir;
  save_checkpoint(m, dir / "m.ckpt");
  EXPECT_EQ(std::filesystem::file_size(dir / "m.ckpt"), checkpoint_size_bytes(m));
  const auto back = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(parameter_digest(back), parameter_digest(m));
  EXPECT_EQ(back->config().to_json(), m->config().to_json());
  EXPECT_EQ(back->provenance(), m->provenance());
}

TEST(Checkpoint, DamageIsDetected) {
  auto m = build_detector(testing::tiny_config(kCats), 2);
  testing::TempDir dir;
  save_checkpoint(m, dir / "m.ckpt");
  auto bytes = read_file_bytes(dir / "m.ckpt");
  bytes[bytes.size() / 2] ^= std::byte{1};
  write_file_bytes(dir / "bad.ckpt", bytes);
  EXPECT_THROW(load_checkpoint(dir / "bad.ckpt"), ChecksumError);
  std::filesystem::resize_file(dir / "m.ckpt", 100);
  EXPECT_THROW(load_checkpoint(dir / "m.ckpt"), IoError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
}

}  // namespace
}  // namespace diredi
