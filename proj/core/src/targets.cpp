#include "diredi/targets.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "diredi/error.hpp"

namespace diredi {

std::int64_t TargetMaps::num_positive() const {
  std::int64_t n = 0;
  for (const auto& lvl : levels) n += (lvl.labels != kBackground).sum().item<std::int64_t>();
  return n;
}

TargetMaps assign_targets(const std::vector<Annotation>& annotations,
                          const std::vector<std::pair<std::int64_t, std::int64_t>>& level_shapes,
                          const std::vector<int>& strides, const std::vector<float>& scale_bounds) {
  if (level_shapes.size() != strides.size() || scale_bounds.size() != strides.size() + 1) {
    throw ShapeError("assign_targets: level shapes, strides and scale bounds disagree");
  }
  const auto batch = static_cast<std::int64_t>(annotations.size());
  TargetMaps maps;
  for (std::size_t l = 0; l < strides.size(); ++l) {
    const auto [h, w] = level_shapes[l];
    const float stride = static_cast<float>(strides[l]);
    const float lo = scale_bounds[l];
    const float hi = scale_bounds[l + 1];
    LevelTargets t;
    t.labels = torch::full({batch, h, w}, kBackground, torch::kInt64);
    t.regression = torch::zeros({batch, 4, h, w});
    t.centerness = torch::zeros({batch, h, w});
    auto lab = t.labels.accessor<std::int64_t, 3>();
    auto reg = t.regression.accessor<float, 4>();
    auto ctr = t.centerness.accessor<float, 3>();
    for (std::int64_t b = 0; b < batch; ++b) {
      const auto& ann = annotations[b];
      for (std::int64_t i = 0; i < h; ++i) {
        const float y = static_cast<float>(i) * stride + std::floor(stride / 2);
        for (std::int64_t j = 0; j < w; ++j) {
          const float x = static_cast<float>(j) * stride + std::floor(stride / 2);
          float best_area = std::numeric_limits<float>::infinity();
          std::size_t best = ann.boxes.size();
          float d[4] = {0, 0, 0, 0};
          for (std::size_t k = 0; k < ann.boxes.size(); ++k) {
            const auto& bx = ann.boxes[k];
            const float dl = x - bx.x1, dt = y - bx.y1, dr = bx.x2 - x, db = bx.y2 - y;
            if (std::min({dl, dt, dr, db}) <= 0.f) continue;
            const float m = std::max({dl, dt, dr, db});
            if (!(m > lo && m <= hi)) continue;
            const float area = bx.area();
            if (area < best_area) {
              best_area = area;
              best = k;
              d[0] = dl;
              d[1] = dt;
              d[2] = dr;
              d[3] = db;
            }
          }
          if (best == ann.boxes.size()) continue;
          lab[b][i][j] = ann.labels[best];
          for (int c = 0; c < 4; ++c) reg[b][c][i][j] = d[c] / stride;
          const float lr = std::min(d[0], d[2]) / std::max(d[0], d[2]);
          const float tb = std::min(d[1], d[3]) / std::max(d[1], d[3]);
          ctr[b][i][j] = std::sqrt(lr * tb);
        }
      }
    }
    maps.levels.push_back(std::move(t));
  }
  return maps;
}

}  // namespace diredi
