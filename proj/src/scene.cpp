#include "sicp/scene.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "sicp/error.hpp"

namespace sicp::sim {

namespace {

using geom::Point2;
using geom::Pose2D;

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

bool boxes_clear(const DetectionBox& a, const DetectionBox& b, double gap) {
  DetectionBox grown = a;
  grown.w += 2.0 * gap;
  grown.l += 2.0 * gap;
  return intersection_area(grown, b) <= 0.0;
}

bool clear_of_objects(Point2 p, const std::vector<SceneObject>& objects, double clearance) {
  for (const auto& o : objects) {
    if (std::hypot(p.x - o.box.x, p.y - o.box.y) < clearance + 0.5 * std::hypot(o.box.w, o.box.l)) {
      return false;
    }
  }
  return true;
}

bool place_objects(const SceneConfig& cfg, std::mt19937_64& rng, std::vector<SceneObject>& out) {
  const std::size_t n = cfg.max_objects == 0
                            ? 0
                            : std::uniform_int_distribution<std::size_t>(cfg.min_objects, cfg.max_objects)(rng);
  out.clear();
  for (std::size_t k = 0; k < n; ++k) {
    bool placed = false;
    for (int tries = 0; tries < 200 && !placed; ++tries) {
      DetectionBox b;
      b.x = uniform(rng, -cfg.half_x, cfg.half_x);
      b.y = uniform(rng, -cfg.half_y, cfg.half_y);
      b.w = uniform(rng, cfg.width_min, cfg.width_max);
      b.l = uniform(rng, cfg.length_min, cfg.length_max);
      const double base = (rng() & 1U) ? std::numbers::pi / 2 : 0.0;
      b.yaw = normalize_half_angle(base + uniform(rng, -cfg.yaw_jitter, cfg.yaw_jitter));
      b.score = 1.0;
      if (std::hypot(b.x, b.y) < cfg.vehicle_clearance + 0.5 * std::hypot(b.w, b.l)) continue;
      bool ok = true;
      for (const auto& o : out) {
        if (!boxes_clear(b, o.box, cfg.min_gap)) {
          ok = false;
          break;
        }
      }
      if (ok) {
        out.push_back({b, static_cast<int>(k)});
        placed = true;
      }
    }
    if (!placed) return false;
  }
  return true;
}

// Ray from the origin along d against segment p->q; returns the ray parameter or +inf.
double ray_segment(Point2 d, Point2 p, Point2 q) {
  const Point2 e{q.x - p.x, q.y - p.y};
  const double denom = d.x * e.y - d.y * e.x;
  if (std::abs(denom) < 1e-15) return std::numeric_limits<double>::infinity();
  const double t = (p.x * e.y - p.y * e.x) / denom;
  const double s = (p.x * d.y - p.y * d.x) / denom;
  if (t <= 0.0 || s < 0.0 || s > 1.0) return std::numeric_limits<double>::infinity();
  return t;
}

}  // namespace

SyntheticScene generate_scene(const SceneConfig& cfg, const geom::GridSpec& grid, std::uint64_t seed) {
  grid.validate();
  if (cfg.min_objects > cfg.max_objects) throw Error(ErrorKind::Config, "scene min_objects > max_objects");
  if (cfg.n_rays < 36) throw Error(ErrorKind::Config, "scene n_rays must be >= 36");
  const double range = cfg.max_range > 0.0
                           ? cfg.max_range
                           : std::hypot(grid.rows * grid.resolution, grid.cols * grid.resolution);

  std::mt19937_64 rng(seed);
  SyntheticScene scene;
  scene.seed = seed;
  scene.ego_pose = Pose2D{0.0, 0.0, 0.0};

  for (std::size_t attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    if (!place_objects(cfg, rng, scene.objects)) continue;
    const std::size_t need = std::min(cfg.min_hidden, scene.objects.size());

    const PointSet ego_pts = raycast_visible_points(scene.objects, scene.ego_pose, cfg.n_rays, range);
    const auto ego_counts = visible_counts(ego_pts, scene.objects);

    // A few sender placements per layout before redrawing the objects.
    for (int s = 0; s < 8; ++s) {
      const double dist = uniform(rng, cfg.sender_min_distance, cfg.sender_max_distance);
      const double bearing = uniform(rng, -std::numbers::pi, std::numbers::pi);
      // Sender drives along one of the lane axes, like the objects.
      const double axis = static_cast<double>(rng() % 4) * (std::numbers::pi / 2);
      const Pose2D sender{dist * std::cos(bearing), dist * std::sin(bearing),
                          axis + uniform(rng, -cfg.yaw_jitter, cfg.yaw_jitter)};
      if (!clear_of_objects({sender.x, sender.y}, scene.objects, cfg.vehicle_clearance)) continue;
      if (need == 0) {
        scene.sender_pose = sender;
        return scene;
      }
      const PointSet snd_pts = raycast_visible_points(scene.objects, sender, cfg.n_rays, range);
      const auto snd_counts = visible_counts(snd_pts, scene.objects);
      const Pose2D to_sender = sender.inverse();
      std::size_t hidden = 0;
      for (std::size_t k = 0; k < scene.objects.size(); ++k) {
        const auto& b = scene.objects[k].box;
        if (ego_counts[k] == 0 && snd_counts[k] > 0 && grid.contains(to_sender.apply({b.x, b.y}))) ++hidden;
      }
      if (hidden >= need) {
        scene.sender_pose = sender;
        return scene;
      }
    }
  }
  throw Error(ErrorKind::RejectionBudget,
              "no scene with " + std::to_string(cfg.min_hidden) + " ego-hidden objects after " +
                  std::to_string(cfg.max_attempts) + " attempts; try fewer objects or a lower min_hidden");
}

PointSet raycast_visible_points(const std::vector<SceneObject>& objects, const Pose2D& sensor,
                                std::size_t n_rays, double max_range) {
  if (n_rays < 36) throw Error(ErrorKind::Config, "raycasting needs at least 36 rays");
  // Edges in the sensor frame.
  const Pose2D to_sensor = sensor.inverse();
  std::vector<std::array<Point2, 4>> edges;
  edges.reserve(objects.size());
  for (const auto& o : objects) {
    auto c = o.box.corners();
    for (auto& p : c) p = to_sensor.apply(p);
    edges.push_back(c);
  }

  PointSet out;
  for (std::size_t r = 0; r < n_rays; ++r) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(r) / static_cast<double>(n_rays);
    const Point2 d{std::cos(a), std::sin(a)};
    double best = std::numeric_limits<double>::infinity();
    int best_id = -1;
    for (std::size_t k = 0; k < edges.size(); ++k) {
      for (std::size_t e = 0; e < 4; ++e) {
        const double t = ray_segment(d, edges[k][e], edges[k][(e + 1) % 4]);
        if (t < best) {
          best = t;
          best_id = objects[k].id;
        }
      }
    }
    if (best_id >= 0 && best <= max_range) {
      out.points.push_back({best * d.x, best * d.y});
      out.object_ids.push_back(best_id);
    }
  }
  return out;
}

PointSet raycast_visible_points(const SyntheticScene& scene, const Pose2D& sensor, std::size_t n_rays,
                                double max_range) {
  return raycast_visible_points(scene.objects, sensor, n_rays, max_range);
}

std::vector<std::size_t> visible_counts(const PointSet& points, const std::vector<SceneObject>& objects) {
  std::vector<std::size_t> counts(objects.size(), 0);
  for (int id : points.object_ids) {
    for (std::size_t k = 0; k < objects.size(); ++k) {
      if (objects[k].id == id) {
        ++counts[k];
        break;
      }
    }
  }
  return counts;
}

ad::Tensor rasterize_bev(const PointSet& points, const geom::GridSpec& grid) {
  grid.validate();
  const std::size_t plane = grid.cells();
  std::vector<double> count(plane, 0.0), sum_di(plane, 0.0), sum_dj(plane, 0.0);
  for (const Point2& p : points.points) {
    const Point2 c = grid.vehicle_to_cell(p);
    const double ri = std::floor(c.x + 0.5), rj = std::floor(c.y + 0.5);
    if (ri < 0 || rj < 0 || ri >= static_cast<double>(grid.rows) || rj >= static_cast<double>(grid.cols)) {
      continue;
    }
    const std::size_t k = static_cast<std::size_t>(ri) * grid.cols + static_cast<std::size_t>(rj);
    count[k] += 1.0;
    sum_di[k] += c.x - ri;
    sum_dj[k] += c.y - rj;
  }
  std::vector<double> out(3 * plane, 0.0);
  for (std::size_t k = 0; k < plane; ++k) {
    if (count[k] == 0.0) continue;
    out[k] = std::log1p(count[k]);
    out[plane + k] = sum_di[k] / count[k];
    out[2 * plane + k] = sum_dj[k] / count[k];
  }
  return ad::Tensor::from({3, grid.rows, grid.cols}, std::move(out));
}

void write_scene(std::ostream& os, const SyntheticScene& scene) {
  const auto old = os.precision(std::numeric_limits<double>::max_digits10);
  os << "scene " << scene.seed << "\n";
  os << "ego " << scene.ego_pose.x << " " << scene.ego_pose.y << " " << scene.ego_pose.yaw << "\n";
  os << "sender " << scene.sender_pose.x << " " << scene.sender_pose.y << " " << scene.sender_pose.yaw << "\n";
  for (const auto& o : scene.objects) {
    os << "object " << o.id << " " << o.box.x << " " << o.box.y << " " << o.box.w << " " << o.box.l << " "
       << o.box.yaw << "\n";
  }
  os << "end\n";
  os.precision(old);
}

SyntheticScene read_scene(std::istream& is) {
  SyntheticScene scene;
  std::string line;
  bool started = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "scene") {
      ls >> scene.seed;
      started = true;
    } else if (tag == "ego" || tag == "sender") {
      double x, y, yaw;
      ls >> x >> y >> yaw;
      (tag == "ego" ? scene.ego_pose : scene.sender_pose) = Pose2D{x, y, yaw};
    } else if (tag == "object") {
      SceneObject o;
      ls >> o.id >> o.box.x >> o.box.y >> o.box.w >> o.box.l >> o.box.yaw;
      scene.objects.push_back(o);
    } else if (tag == "end") {
      if (!started) break;
      return scene;
    } else {
      throw Error(ErrorKind::Config, "unknown scene record tag '" + tag + "'");
    }
    if (ls.fail()) throw Error(ErrorKind::Config, "malformed scene record line: " + line);
  }
  throw Error(ErrorKind::Config, "scene record missing 'scene' header or 'end'");
}

std::string scene_to_string(const SyntheticScene& scene) {
  std::ostringstream os;
  write_scene(os, scene);
  return os.str();
}

SyntheticScene scene_from_string(const std::string& text) {
  std::istringstream is(text);
  return read_scene(is);
}

}  // namespace sicp::sim
