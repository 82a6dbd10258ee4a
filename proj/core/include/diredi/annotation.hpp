#pragma once

#include <string>
#include <vector>

namespace diredi {

// Axis-aligned box in pixel coordinates, (x1, y1) top-left, (x2, y2)
// bottom-right, continuous coordinates.
struct Box {
  float x1 = 0.f;
  float y1 = 0.f;
  float x2 = 0.f;
  float y2 = 0.f;

  float width() const { return x2 - x1; }
  float height() const { return y2 - y1; }
  float area() const { return width() > 0.f && height() > 0.f ? width() * height() : 0.f; }
  bool valid() const { return x2 > x1 && y2 > y1; }

  friend bool operator==(const Box&, const Box&) = default;
};

double iou(const Box& a, const Box& b);

Box clip_box(const Box& b, float width, float height);

// Ground truth for one image. `labels` index the owning dataset's
// category list (or a model's class list once remapped).
struct Annotation {
  std::string image_id;
  int image_width = 0;
  int image_height = 0;
  std::vector<Box> boxes;
  std::vector<int> labels;
  std::vector<bool> difficult;

  std::size_t size() const { return boxes.size(); }
  bool is_difficult(std::size_t i) const { return i < difficult.size() && difficult[i]; }
};

}  // namespace diredi
