#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace cfl {

/// Axis-aligned box in continuous pixel coordinates. Area is
/// (x_max - x_min) * (y_max - y_min); there is no +1 pixel convention.
struct BoundingBox {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }

  bool valid() const {
    return std::isfinite(x_min) && std::isfinite(y_min) && std::isfinite(x_max) &&
           std::isfinite(y_max) && x_min < x_max && y_min < y_max;
  }

  bool operator==(const BoundingBox&) const = default;
};

/// Clips a box to [0,w] x [0,h]. The result may be degenerate.
inline BoundingBox clip(const BoundingBox& b, double w, double h) {
  return {std::clamp(b.x_min, 0.0, w), std::clamp(b.y_min, 0.0, h), std::clamp(b.x_max, 0.0, w),
          std::clamp(b.y_max, 0.0, h)};
}

/// A scored, labelled box. `class_id` uses the internal 0-based label index
/// and is never the background index.
struct Detection {
  BoundingBox box;
  int class_id = 0;
  double score = 0.0;
};

inline void require_valid(const BoundingBox& b, const char* what) {
  if (!b.valid()) {
    throw std::invalid_argument(std::string(what) + ": degenerate or non-finite box");
  }
}

inline double intersection_area(const BoundingBox& a, const BoundingBox& b) {
  const double w = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double h = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  return (w > 0.0 && h > 0.0) ? w * h : 0.0;
}

/// Intersection over union. Throws std::invalid_argument on a degenerate box.
inline double iou(const BoundingBox& a, const BoundingBox& b) {
  require_valid(a, "iou");
  require_valid(b, "iou");
  const double inter = intersection_area(a, b);
  return inter / (a.area() + b.area() - inter);
}

namespace detail {

inline bool score_order(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.box.x_min != b.box.x_min) return a.box.x_min < b.box.x_min;
  return a.box.y_min < b.box.y_min;
}

}  // namespace detail

/// Class-wise greedy non-maximum suppression.
///
/// Detections are visited by descending score (ties: smaller x_min, then
/// smaller y_min first). A detection is dropped when its IoU with an already
/// kept detection of the same class exceeds `iou_threshold`. The returned list
/// is ordered by descending score across all classes.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) {
    throw std::invalid_argument("nms: iou_threshold must lie in (0,1]");
  }
  std::stable_sort(dets.begin(), dets.end(), detail::score_order);
  std::vector<Detection> kept;
  kept.reserve(dets.size());
  for (const auto& d : dets) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.class_id == d.class_id && iou(k.box, d.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

}  // namespace cfl
