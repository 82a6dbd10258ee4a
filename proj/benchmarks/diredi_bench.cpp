#include <benchmark/benchmark.h>
#include <torch/torch.h>

#include <random>

#include "diredi/evaluation.hpp"
#include "diredi/fgd.hpp"
#include "diredi/inference.hpp"
#include "diredi/packet.hpp"
#include "diredi/weights.hpp"

namespace {

using namespace diredi;

const std::vector<std::string> kCats{"disc", "square", "triangle", "cross", "bar", "star"};

void forward(benchmark::State& state, Tier tier) {
  torch::set_num_threads(1);
  auto model = build_detector(DetectorConfig::preset(tier, kCats), 0);
  model->eval();
  torch::NoGradGuard guard;
  const auto images = torch::randn({8, 3, 64, 64});
  for (auto _ : state) benchmark::DoNotOptimize(model->forward(images).head.class_logits[0]);
  state.SetItemsProcessed(state.iterations() * 8);
  state.counters["params"] = static_cast<double>(model->parameter_count());
}
BENCHMARK_CAPTURE(forward, large, Tier::large)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(forward, tutor, Tier::tutor)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(forward, edge, Tier::edge)->Unit(benchmark::kMillisecond);

void feature_distill(benchmark::State& state) {
  torch::set_num_threads(1);
  torch::manual_seed(0);
  const auto cfg = DetectorConfig::preset(Tier::tutor, kCats);
  FeaturePyramid teacher, student;
  for (std::size_t l = 0; l < cfg.strides.size(); ++l) {
    const std::int64_t s = 64 / cfg.strides[l];
    teacher.strides.push_back(cfg.strides[l]);
    student.strides.push_back(cfg.strides[l]);
    teacher.levels.push_back(torch::randn({8, cfg.neck_channels, s, s}));
    student.levels.push_back(torch::randn({8, cfg.neck_channels, s, s}, torch::requires_grad()));
  }
  std::vector<Annotation> anns(8);
  for (auto& a : anns) {
    a.boxes = {{4, 4, 24, 24}, {30, 30, 60, 50}};
    a.labels = {0, 1};
  }
  FeatureDistiller distiller(cfg.strides.size(), cfg.neck_channels, cfg.neck_channels);
  for (auto _ : state) {
    auto loss = feature_distill_loss(teacher, student, anns, FGDConfig{}, distiller).total();
    loss.backward();
    benchmark::DoNotOptimize(loss);
  }
}
BENCHMARK(feature_distill)->Unit(benchmark::kMillisecond);

void nms_boxes(benchmark::State& state) {
  std::mt19937 rng(1);
  std::uniform_real_distribution<float> pos(0.f, 300.f), size(5.f, 60.f), score(0.f, 1.f);
  std::vector<Box> boxes;
  std::vector<float> scores;
  for (int i = 0; i < state.range(0); ++i) {
    const float x = pos(rng), y = pos(rng);
    boxes.push_back({x, y, x + size(rng), y + size(rng)});
    scores.push_back(score(rng));
  }
  for (auto _ : state) benchmark::DoNotOptimize(nms(boxes, scores, 0.6));
}
BENCHMARK(nms_boxes)->Arg(100)->Arg(1000);

void average_precision_curve(benchmark::State& state) {
  std::mt19937 rng(2);
  std::vector<bool> flags(static_cast<std::size_t>(state.range(0)));
  for (std::size_t i = 0; i < flags.size(); ++i) flags[i] = rng() % 3 == 0;
  for (auto _ : state) benchmark::DoNotOptimize(average_precision(flags, flags.size() / 3));
}
BENCHMARK(average_precision_curve)->Arg(1000)->Arg(100000);

void packet_round_trip(benchmark::State& state) {
  auto t1 = build_detector(DetectorConfig::preset(Tier::tutor, kCats), 1);
  auto t2 = build_detector(DetectorConfig::preset(Tier::tutor, kCats), 2);
  KnowledgePacket p;
  p.delta = compute_delta(extract_weights(t1), extract_weights(t2), 1.0);
  p.manifest.class_plan = kCats;
  p.manifest.emulation_plan = kCats;
  p.manifest.customer_plan = kCats;
  p.manifest.architecture_digest = architecture_digest(p.delta);
  p.manifest.created = "1970-01-01T00:00:00Z";
  p.manifest.presumed_dataset_fingerprint = std::string(64, '0');
  const auto size = static_cast<std::int64_t>(encode_packet(p).size());
  for (auto _ : state) benchmark::DoNotOptimize(decode_packet(encode_packet(p)));
  state.SetBytesProcessed(state.iterations() * size);
}
BENCHMARK(packet_round_trip)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
