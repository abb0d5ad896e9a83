#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "sicp/boxes.hpp"
#include "sicp/geometry.hpp"
#include "sicp/tensor.hpp"

namespace sicp::sim {

struct SceneObject {
  DetectionBox box;
  int id = 0;
};

/// Synthetic scene generation knobs. Coordinates are in the ego frame, which
/// doubles as the scene's world frame (the ego sits at the origin facing +x).
struct SceneConfig {
  std::size_t min_objects = 8;
  std::size_t max_objects = 16;
  double width_min = 1.8;
  double width_max = 2.2;
  double length_min = 4.0;
  double length_max = 5.0;
  /// Object centers are drawn from [-half_x, half_x] x [-half_y, half_y].
  double half_x = 60.0;
  double half_y = 28.0;
  /// Headings are 0 or pi/2 (road-aligned) plus uniform jitter of this size.
  double yaw_jitter = 0.2;
  double min_gap = 0.5;
  double sender_min_distance = 12.0;
  double sender_max_distance = 40.0;
  double vehicle_clearance = 3.0;
  /// Objects that must be invisible to the ego yet seen by the sender.
  std::size_t min_hidden = 1;
  std::size_t n_rays = 720;
  /// 0 selects the ego grid diagonal.
  double max_range = 0.0;
  std::size_t max_attempts = 500;
};

struct SyntheticScene {
  geom::Pose2D ego_pose;
  geom::Pose2D sender_pose;
  std::vector<SceneObject> objects;
  std::uint64_t seed = 0;
};

/// Ray hits in a sensor frame, each tagged with the object it landed on.
struct PointSet {
  std::vector<geom::Point2> points;
  std::vector<int> object_ids;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

/// Deterministic in (cfg, seed). Throws RejectionBudget when no layout with
/// the requested occlusion structure is found within cfg.max_attempts.
SyntheticScene generate_scene(const SceneConfig& cfg, const geom::GridSpec& grid, std::uint64_t seed);

/// One point per ray at the nearest box edge, in the sensor frame.
PointSet raycast_visible_points(const std::vector<SceneObject>& objects, const geom::Pose2D& sensor,
                                std::size_t n_rays, double max_range);
PointSet raycast_visible_points(const SyntheticScene& scene, const geom::Pose2D& sensor,
                                std::size_t n_rays, double max_range);

/// Hit counts per object, aligned with `objects`.
std::vector<std::size_t> visible_counts(const PointSet& points, const std::vector<SceneObject>& objects);

/// [3, rows, cols]: log1p(hits), mean row offset, mean column offset (cell units).
ad::Tensor rasterize_bev(const PointSet& points, const geom::GridSpec& grid);

/// Line-oriented text record (seed, poses, boxes) for debugging round trips.
void write_scene(std::ostream& os, const SyntheticScene& scene);
SyntheticScene read_scene(std::istream& is);
std::string scene_to_string(const SyntheticScene& scene);
SyntheticScene scene_from_string(const std::string& text);

}  // namespace sicp::sim
