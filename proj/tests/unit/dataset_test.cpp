#include <gtest/gtest.h>

#include "diredi/error.hpp"
#include "diredi/inference.hpp"
#include "test_util.hpp"

namespace diredi {
namespace {

TEST(ToyData, DeterministicUnderSeed) {
  const auto a = testing::tiny_dataset(30, {"disc", "square", "star"}, 11);
  const auto b = testing::tiny_dataset(30, {"disc", "square", "star"}, 11);
  const auto c = testing::tiny_dataset(30, {"disc", "square", "star"}, 12);
  EXPECT_EQ(dataset_fingerprint(a), dataset_fingerprint(b));
  EXPECT_NE(dataset_fingerprint(a), dataset_fingerprint(c));
}

TEST(ToyData, BoxesInsideCanvasAndDisjoint) {
  ToySpec spec;
  spec.num_images = 200;
  spec.seed = 3;
  const auto ds = generate_toy_dataset(spec);
  ASSERT_EQ(ds.size(), 200u);
  for (const auto& item : ds.items) {
    const auto& ann = item.annotation;
    ASSERT_GE(static_cast<int>(ann.size()), spec.min_objects);
    ASSERT_LE(static_cast<int>(ann.size()), spec.max_objects);
    EXPECT_EQ(item.image.rows, spec.canvas);
    for (std::size_t i = 0; i < ann.size(); ++i) {
      const auto& b = ann.boxes[i];
      EXPECT_GE(b.x1, 0.f);
      EXPECT_GE(b.y1, 0.f);
      EXPECT_LE(b.x2, static_cast<float>(spec.canvas));
      EXPECT_LE(b.y2, static_cast<float>(spec.canvas));
      EXPECT_LT(b.x1, b.x2);
      EXPECT_LT(b.y1, b.y2);
      for (std::size_t j = i + 1; j < ann.size(); ++j) EXPECT_EQ(iou(b, ann.boxes[j]), 0.0) << item.image_id;
    }
  }
}

TEST(ToyData, AllClassesAppear) {
  const auto ds = testing::tiny_dataset(100, toy_shape_classes(), 1);
  EXPECT_EQ(ds.labelled_categories().size(), toy_shape_classes().size());
}

TEST(ToyData, SpecValidation) {
  ToySpec spec;
  spec.classes = {"unicorn"};
  EXPECT_THROW(spec.validate(), ConfigError);
  spec = ToySpec{};
  spec.canvas = 50;
  EXPECT_THROW(spec.validate(), ConfigError);
  spec = ToySpec{};
  spec.classes = {"disc", "disc"};
  EXPECT_THROW(spec.validate(), ConfigError);
}

TEST(Fingerprint, IndependentOfItemOrder) {
  auto ds = testing::tiny_dataset(10, {"disc", "bar"}, 2);
  const auto before = dataset_fingerprint(ds);
  std::reverse(ds.items.begin(), ds.items.end());
  EXPECT_EQ(dataset_fingerprint(ds), before);
  ds.items[0].annotation.boxes[0].x1 += 1.f;
  EXPECT_NE(dataset_fingerprint(ds), before);
}

TEST(CategoryPlanTest, SplitModes) {
  const auto p = CategoryPlan::toy_experiment2();
  EXPECT_EQ(plan_categories(p, SplitMode::presumed), (std::vector<std::string>{"disc", "square", "cross", "bar"}));
  EXPECT_EQ(plan_categories(p, SplitMode::customer_actual),
            (std::vector<std::string>{"disc", "square", "cross", "bar", "chevron"}));
  EXPECT_EQ(plan_categories(p, SplitMode::verification),
            (std::vector<std::string>{"disc", "square", "triangle", "cross", "bar"}));
  EXPECT_EQ(split_mode_from_string(to_string(SplitMode::customer_actual)), SplitMode::customer_actual);
  EXPECT_THROW(split_mode_from_string("everything"), ConfigError);
}

TEST(CategoryPlanTest, ValidationAndJson) {
  for (const auto& p : {CategoryPlan::toy_experiment1(), CategoryPlan::toy_experiment2(),
                        CategoryPlan::voc_experiment1(), CategoryPlan::voc_experiment2()}) {
    EXPECT_NO_THROW(p.validate());
    EXPECT_EQ(CategoryPlan::from_json(p.to_json()).to_json(), p.to_json());
  }
  auto bad = CategoryPlan::toy_experiment1();
  bad.private_categories.push_back("disc");
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = CategoryPlan::toy_experiment1();
  bad.removed_categories = {"star"};
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Filter, KeepsOnlyRequestedCategories) {
  const auto ds = testing::tiny_dataset(200, toy_shape_classes(), 4);
  const auto p = CategoryPlan::toy_experiment1();
  const auto out = split_by_plan(ds, p, SplitMode::presumed);
  ASSERT_FALSE(out.empty());
  EXPECT_LT(out.size(), ds.size());
  const auto presumed = plan_categories(p, SplitMode::presumed);
  for (const auto& c : out.labelled_categories()) {
    EXPECT_NE(std::find(presumed.begin(), presumed.end(), c), presumed.end()) << c;
  }
  for (const auto& item : out.items) EXPECT_FALSE(item.annotation.boxes.empty());
}

TEST(Filter, StrictPolicyDropsOverlappingExclusions) {
  DetectionDataset ds;
  ds.category_names = {"a", "b"};
  DetectionItem item;
  item.image_id = "x";
  item.annotation.boxes = {{0, 0, 10, 10}, {1, 1, 10, 10}};
  item.annotation.labels = {0, 1};
  ds.items.push_back(item);
  EXPECT_TRUE(filter_categories(ds, {"a"}).empty());
  FilterPolicy loose;
  loose.strict_drop = false;
  const auto kept = filter_categories(ds, {"a"}, loose);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept.items[0].annotation.size(), 1u);
}

TEST(Persistence, SaveLoadRoundTrip) {
  const auto ds = testing::tiny_dataset(12, {"disc", "ring"}, 9);
  testing::TempDir dir;
  save_dataset(ds, dir.path());
  const auto back = load_dataset(dir.path());
  EXPECT_EQ(back.category_names, ds.category_names);
  EXPECT_EQ(dataset_fingerprint(back), dataset_fingerprint(ds));
}

TEST(Persistence, MissingDirectoryIsIoError) {
  EXPECT_THROW(load_dataset("/nonexistent/diredi/data"), IoError);
}

TEST(LabelMapTest, RemapsByName) {
  LabelMap m({"a", "b", "c"}, {"c", "a"});
  EXPECT_EQ(m(0), 1);
  EXPECT_EQ(m(2), 0);
  EXPECT_THROW(m(1), ConfigError);
  LabelMap drop({"a", "b"}, {"b"}, true);
  EXPECT_FALSE(drop(0).has_value());
  EXPECT_EQ(drop(1), 0);
}

TEST(Batching, ShapesAndFlip) {
  const auto ds = testing::tiny_dataset(4, {"disc", "bar"}, 5);
  LabelMap labels(ds.category_names, ds.category_names);
  const std::vector<std::size_t> idx{0, 1, 2};
  const auto b = make_batch(ds, idx, labels);
  EXPECT_EQ(b.images.sizes(), (torch::IntArrayRef{3, 3, 64, 64}));
  ASSERT_EQ(b.annotations.size(), 3u);
  BatchOptions flip;
  flip.hflip = true;
  const auto f = make_batch(ds, idx, labels, flip);
  EXPECT_TRUE(torch::equal(f.images, b.images.flip({3})));
  const auto& box = b.annotations[0].boxes[0];
  const auto& fbox = f.annotations[0].boxes[0];
  EXPECT_FLOAT_EQ(fbox.x1, 64.f - box.x2);
  EXPECT_FLOAT_EQ(fbox.x2, 64.f - box.x1);
  EXPECT_FLOAT_EQ(fbox.y1, box.y1);
}

}  // namespace
}  // namespace diredi
