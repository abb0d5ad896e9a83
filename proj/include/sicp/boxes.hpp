#pragma once

#include <array>
#include <vector>

#include "sicp/geometry.hpp"

namespace sicp {

/// Rotated BEV box. `l` runs along the heading `yaw`, `w` across it.
struct DetectionBox {
  double x = 0.0;
  double y = 0.0;
  double w = 1.0;
  double l = 1.0;
  double yaw = 0.0;
  double score = 1.0;

  std::array<geom::Point2, 4> corners() const;
  double area() const { return w * l; }
  /// Same box expressed through `pose` (child frame -> parent frame).
  DetectionBox transformed(const geom::Pose2D& pose) const;

  friend bool operator==(const DetectionBox&, const DetectionBox&) = default;
};

/// Wraps into (-pi/2, pi/2]; boxes are symmetric under a half turn.
double normalize_half_angle(double a);

/// Exact intersection-over-union of two rotated boxes by convex clipping.
/// Throws DegenerateBox for non-positive extents.
double rotated_iou(const DetectionBox& a, const DetectionBox& b);

/// Area of the intersection polygon; exposed for tests.
double intersection_area(const DetectionBox& a, const DetectionBox& b);

/// Greedy rotated NMS. Returns kept indices in descending score order (ties by
/// index). A box is suppressed when its IoU with a kept box exceeds `iou_threshold`.
std::vector<std::size_t> nms_rotated(const std::vector<DetectionBox>& boxes, double iou_threshold);
std::vector<DetectionBox> apply_nms(const std::vector<DetectionBox>& boxes, double iou_threshold);

}  // namespace sicp
