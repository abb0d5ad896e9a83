#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "sicp/error.hpp"
#include "sicp/scene.hpp"

using namespace sicp;
using namespace sicp::sim;

namespace {

// Exhaustive nearest-hit oracle in the sensor frame (sensor at the origin).
std::vector<int> oracle_hits(const std::vector<SceneObject>& objects, std::size_t n_rays) {
  std::vector<int> ids;
  for (std::size_t r = 0; r < n_rays; ++r) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(r) / static_cast<double>(n_rays);
    const double dx = std::cos(a), dy = std::sin(a);
    double best = std::numeric_limits<double>::infinity();
    int id = -1;
    for (const auto& o : objects) {
      const auto c = o.box.corners();
      for (std::size_t e = 0; e < 4; ++e) {
        const auto p = c[e], q = c[(e + 1) % 4];
        const double ex = q.x - p.x, ey = q.y - p.y;
        const double den = dx * ey - dy * ex;
        if (std::abs(den) < 1e-15) continue;
        const double t = (p.x * ey - p.y * ex) / den;
        const double u = (p.x * dy - p.y * dx) / den;
        if (t > 0 && u >= 0 && u <= 1 && t < best) {
          best = t;
          id = o.id;
        }
      }
    }
    if (id >= 0) ids.push_back(id);
  }
  return ids;
}

SceneObject obj(int id, double x, double y, double w, double l, double yaw = 0.0) {
  return {DetectionBox{x, y, w, l, yaw, 1.0}, id};
}

}  // namespace

TEST_CASE("zero objects gives an empty scene") {
  SceneConfig cfg;
  cfg.min_objects = cfg.max_objects = 0;
  cfg.min_hidden = 0;
  const SyntheticScene s = generate_scene(cfg, geom::GridSpec{}, 3);
  CHECK(s.objects.empty());
  CHECK(raycast_visible_points(s, s.ego_pose, 720, 100.0).empty());
}

TEST_CASE("scene generation is reproducible from the seed") {
  const SceneConfig cfg;
  const auto a = generate_scene(cfg, geom::GridSpec{}, 42), b = generate_scene(cfg, geom::GridSpec{}, 42);
  CHECK(scene_to_string(a) == scene_to_string(b));
  CHECK(scene_to_string(a) != scene_to_string(generate_scene(cfg, geom::GridSpec{}, 43)));
}

TEST_CASE("generated boxes do not overlap and stay in bounds") {
  const SceneConfig cfg;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = generate_scene(cfg, geom::GridSpec{}, seed);
    CHECK(s.objects.size() >= cfg.min_objects);
    CHECK(s.objects.size() <= cfg.max_objects);
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
      CHECK(std::abs(s.objects[i].box.x) <= cfg.half_x);
      CHECK(std::abs(s.objects[i].box.y) <= cfg.half_y);
      for (std::size_t j = i + 1; j < s.objects.size(); ++j) CHECK(intersection_area(s.objects[i].box, s.objects[j].box) == 0.0);
    }
  }
}

TEST_CASE("default scenes hide something from the ego that the sender sees") {
  const SceneConfig cfg;
  const geom::GridSpec grid;
  const double range = std::hypot(128.0, 64.0);
  std::size_t ego_union_gain = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto s = generate_scene(cfg, grid, seed);
    const auto ego = visible_counts(raycast_visible_points(s, s.ego_pose, cfg.n_rays, range), s.objects);
    const auto snd = visible_counts(raycast_visible_points(s, s.sender_pose, cfg.n_rays, range), s.objects);
    std::size_t hidden = 0, ego_seen = 0, union_seen = 0;
    for (std::size_t k = 0; k < s.objects.size(); ++k) {
      hidden += ego[k] == 0 && snd[k] > 0;
      ego_seen += ego[k] > 0;
      union_seen += ego[k] > 0 || snd[k] > 0;
    }
    CHECK(hidden >= 1);
    CHECK(union_seen >= ego_seen);
    ego_union_gain += union_seen > ego_seen;
  }
  CHECK(ego_union_gain == 100);
}

TEST_CASE("impossible occlusion request exhausts the rejection budget") {
  SceneConfig cfg;
  cfg.min_objects = cfg.max_objects = 1;
  cfg.min_hidden = 1;
  cfg.max_attempts = 5;
  try {
    generate_scene(cfg, geom::GridSpec{}, 1);
    FAIL("expected RejectionBudget");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::RejectionBudget);
  }
}

TEST_CASE("unit square ten meters ahead, 360 rays") {
  const std::vector<SceneObject> objs{obj(1, 10.0, 0.0, 1.0, 1.0)};
  const PointSet p = raycast_visible_points(objs, geom::Pose2D(), 360, 100.0);
  const auto ref = oracle_hits(objs, 360);
  CHECK(p.size() == ref.size());
  CHECK(p.size() == 7);
  for (const auto& q : p.points) CHECK(q.x == doctest::Approx(9.5));
}

TEST_CASE("strict occlusion: a box fully behind another gets no points") {
  const std::vector<SceneObject> objs{obj(1, 10.0, 0.0, 4.0, 1.0), obj(2, 20.0, 0.0, 1.0, 1.0)};
  const PointSet p = raycast_visible_points(objs, geom::Pose2D(), 720, 100.0);
  const auto counts = visible_counts(p, objs);
  CHECK(counts[0] > 0);
  CHECK(counts[1] == 0);
}

TEST_CASE("raycast agrees with the exhaustive oracle on random layouts") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> pos(-30, 30), ang(-1.5, 1.5);
  for (int t = 0; t < 10; ++t) {
    std::vector<SceneObject> objs;
    for (int k = 0; k < 6; ++k) objs.push_back(obj(k, pos(rng), pos(rng), 2.0, 4.5, ang(rng)));
    const PointSet p = raycast_visible_points(objs, geom::Pose2D(), 360, 1e9);
    const auto ref = oracle_hits(objs, 360);
    CHECK(p.object_ids == ref);
  }
}

TEST_CASE("visibility is monotone under object removal") {
  const SceneConfig cfg;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto s = generate_scene(cfg, geom::GridSpec{}, seed);
    const auto full = visible_counts(raycast_visible_points(s.objects, s.ego_pose, 720, 200.0), s.objects);
    for (std::size_t drop = 0; drop < s.objects.size(); ++drop) {
      auto fewer = s.objects;
      fewer.erase(fewer.begin() + static_cast<std::ptrdiff_t>(drop));
      const auto c = visible_counts(raycast_visible_points(fewer, s.ego_pose, 720, 200.0), fewer);
      for (std::size_t k = 0, m = 0; k < s.objects.size(); ++k) {
        if (k == drop) continue;
        CHECK(c[m++] >= full[k]);
      }
    }
  }
}

TEST_CASE("too few rays is a config error") {
  CHECK_THROWS_AS(raycast_visible_points(std::vector<SceneObject>{}, geom::Pose2D(), 10, 10.0), Error);
}

TEST_CASE("rasterization closed forms") {
  const geom::GridSpec g{4, 4, 1.0, {}};
  const ad::Tensor empty = rasterize_bev(PointSet{}, g);
  CHECK(empty.shape() == ad::Shape{3, 4, 4});
  for (double v : empty.data()) CHECK(v == 0.0);

  PointSet one;
  one.points.push_back(g.cell_to_vehicle(1, 2));
  one.object_ids.push_back(0);
  const ad::Tensor r1 = rasterize_bev(one, g);
  CHECK(r1.at(0, 1, 2) == doctest::Approx(std::log(2.0)));
  CHECK(r1.at(1, 1, 2) == doctest::Approx(0.0));
  CHECK(r1.at(2, 1, 2) == doctest::Approx(0.0));

  PointSet two;
  two.points = {g.cell_to_vehicle(2.25, 1.0), g.cell_to_vehicle(1.75, 1.0)};
  two.object_ids = {0, 0};
  const ad::Tensor r2 = rasterize_bev(two, g);
  CHECK(r2.at(0, 2, 1) == doctest::Approx(std::log1p(2.0)));
  CHECK(std::abs(r2.at(1, 2, 1)) < 1e-12);
}

TEST_CASE("rasterization is permutation invariant") {
  const auto s = generate_scene(SceneConfig{}, geom::GridSpec{}, 8);
  PointSet p = raycast_visible_points(s, s.ego_pose, 720, 200.0);
  const ad::Tensor a = rasterize_bev(p, geom::GridSpec{});
  std::mt19937_64 rng(1);
  std::vector<std::size_t> idx(p.size());
  for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
  std::shuffle(idx.begin(), idx.end(), rng);
  PointSet q;
  for (std::size_t k : idx) {
    q.points.push_back(p.points[k]);
    q.object_ids.push_back(p.object_ids[k]);
  }
  const ad::Tensor b = rasterize_bev(q, geom::GridSpec{});
  for (std::size_t k = 0; k < a.numel(); ++k) CHECK(std::abs(a.data()[k] - b.data()[k]) < 1e-12);
}

TEST_CASE("scene text record round trip") {
  const auto s = generate_scene(SceneConfig{}, geom::GridSpec{}, 77);
  const SyntheticScene back = scene_from_string(scene_to_string(s));
  CHECK(back.seed == s.seed);
  CHECK(back.ego_pose == s.ego_pose);
  CHECK(back.sender_pose == s.sender_pose);
  REQUIRE(back.objects.size() == s.objects.size());
  for (std::size_t k = 0; k < s.objects.size(); ++k) {
    CHECK(back.objects[k].id == s.objects[k].id);
    CHECK(back.objects[k].box == s.objects[k].box);
  }
}
