#include "sicp/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "sicp/error.hpp"

namespace sicp {

namespace {

using geom::Point2;

double cross(Point2 o, Point2 a, Point2 b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); }

double polygon_area(const std::vector<Point2>& poly) {
  double s = 0.0;
  for (std::size_t k = 0; k < poly.size(); ++k) {
    const Point2& p = poly[k];
    const Point2& q = poly[(k + 1) % poly.size()];
    s += p.x * q.y - q.x * p.y;
  }
  return 0.5 * std::abs(s);
}

// Clip a convex polygon against the half-plane left of edge p->q.
std::vector<Point2> clip(const std::vector<Point2>& poly, Point2 p, Point2 q) {
  std::vector<Point2> out;
  out.reserve(poly.size() + 1);
  for (std::size_t k = 0; k < poly.size(); ++k) {
    const Point2 cur = poly[k];
    const Point2 prev = poly[(k + poly.size() - 1) % poly.size()];
    const double dc = cross(p, q, cur);
    const double dp = cross(p, q, prev);
    if (dc >= 0.0) {
      if (dp < 0.0) {
        const double t = dp / (dp - dc);
        out.push_back({prev.x + t * (cur.x - prev.x), prev.y + t * (cur.y - prev.y)});
      }
      out.push_back(cur);
    } else if (dp >= 0.0) {
      const double t = dp / (dp - dc);
      out.push_back({prev.x + t * (cur.x - prev.x), prev.y + t * (cur.y - prev.y)});
    }
  }
  return out;
}

void check_box(const DetectionBox& b) {
  if (!(b.w > 0.0 && b.l > 0.0) || !std::isfinite(b.x) || !std::isfinite(b.y) || !std::isfinite(b.yaw)) {
    throw Error(ErrorKind::DegenerateBox, "box needs finite pose and positive w, l");
  }
}

}  // namespace

std::array<geom::Point2, 4> DetectionBox::corners() const {
  const double c = std::cos(yaw), s = std::sin(yaw);
  const double hl = 0.5 * l, hw = 0.5 * w;
  const std::array<Point2, 4> local{{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
  std::array<Point2, 4> out;
  for (std::size_t k = 0; k < 4; ++k) {
    out[k] = {x + c * local[k].x - s * local[k].y, y + s * local[k].x + c * local[k].y};
  }
  return out;
}

DetectionBox DetectionBox::transformed(const geom::Pose2D& pose) const {
  DetectionBox b = *this;
  const Point2 p = pose.apply({x, y});
  b.x = p.x;
  b.y = p.y;
  b.yaw = normalize_half_angle(yaw + pose.yaw);
  return b;
}

double normalize_half_angle(double a) {
  a = std::fmod(a, std::numbers::pi);
  if (a <= -std::numbers::pi / 2) a += std::numbers::pi;
  if (a > std::numbers::pi / 2) a -= std::numbers::pi;
  return a;
}

double intersection_area(const DetectionBox& a, const DetectionBox& b) {
  check_box(a);
  check_box(b);
  const double reach = 0.5 * (std::hypot(a.w, a.l) + std::hypot(b.w, b.l));
  if (std::hypot(a.x - b.x, a.y - b.y) > reach) return 0.0;

  const auto ca = a.corners();
  const auto cb = b.corners();
  std::vector<Point2> poly(ca.begin(), ca.end());
  for (std::size_t k = 0; k < 4 && !poly.empty(); ++k) poly = clip(poly, cb[k], cb[(k + 1) % 4]);
  return poly.size() < 3 ? 0.0 : polygon_area(poly);
}

double rotated_iou(const DetectionBox& a, const DetectionBox& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

std::vector<std::size_t> nms_rotated(const std::vector<DetectionBox>& boxes, double iou_threshold) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return boxes[i].score > boxes[j].score; });
  std::vector<std::uint8_t> suppressed(boxes.size(), 0);
  std::vector<std::size_t> keep;
  for (std::size_t a = 0; a < order.size(); ++a) {
    const std::size_t i = order[a];
    if (suppressed[i]) continue;
    keep.push_back(i);
    for (std::size_t b = a + 1; b < order.size(); ++b) {
      const std::size_t j = order[b];
      if (!suppressed[j] && rotated_iou(boxes[i], boxes[j]) > iou_threshold) suppressed[j] = 1;
    }
  }
  return keep;
}

std::vector<DetectionBox> apply_nms(const std::vector<DetectionBox>& boxes, double iou_threshold) {
  std::vector<DetectionBox> out;
  for (std::size_t i : nms_rotated(boxes, iou_threshold)) out.push_back(boxes[i]);
  return out;
}

}  // namespace sicp
