#include "sicp/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "sicp/error.hpp"

namespace sicp::geom {

namespace {

constexpr double kFootprintTol = 1e-9;

Affine2D pose_affine(const Pose2D& p) {
  const double c = std::cos(p.yaw), s = std::sin(p.yaw);
  return Affine2D{{c, -s, p.x, s, c, p.y}};
}

Affine2D cell_affine(const GridSpec& g) {
  const double r = g.resolution;
  const Affine2D local{{r, 0.0, -0.5 * static_cast<double>(g.rows - 1) * r, 0.0, r,
                        -0.5 * static_cast<double>(g.cols - 1) * r}};
  return pose_affine(g.origin).compose(local);
}

struct Sample {
  std::size_t idx[4];
  double w[4];
};

// Bilinear footprint of a continuous source coordinate; false when any
// contributing corner falls outside the source grid.
bool footprint(Point2 s, std::size_t rows, std::size_t cols, Sample& out) {
  const double hi_i = static_cast<double>(rows - 1), hi_j = static_cast<double>(cols - 1);
  if (!(s.x >= -kFootprintTol && s.x <= hi_i + kFootprintTol && s.y >= -kFootprintTol &&
        s.y <= hi_j + kFootprintTol)) {
    return false;
  }
  const double si = std::clamp(s.x, 0.0, hi_i);
  const double sj = std::clamp(s.y, 0.0, hi_j);
  const std::size_t i0 = std::min(static_cast<std::size_t>(std::floor(si)), rows - 1);
  const std::size_t j0 = std::min(static_cast<std::size_t>(std::floor(sj)), cols - 1);
  const std::size_t i1 = std::min(i0 + 1, rows - 1);
  const std::size_t j1 = std::min(j0 + 1, cols - 1);
  const double fi = si - static_cast<double>(i0);
  const double fj = sj - static_cast<double>(j0);
  out.idx[0] = i0 * cols + j0;
  out.idx[1] = i0 * cols + j1;
  out.idx[2] = i1 * cols + j0;
  out.idx[3] = i1 * cols + j1;
  out.w[0] = (1.0 - fi) * (1.0 - fj);
  out.w[1] = (1.0 - fi) * fj;
  out.w[2] = fi * (1.0 - fj);
  out.w[3] = fi * fj;
  return true;
}

}  // namespace

double normalize_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  a = std::fmod(a, two_pi);
  if (a <= -std::numbers::pi) a += two_pi;
  if (a > std::numbers::pi) a -= two_pi;
  return a;
}

Pose2D::Pose2D(double x_, double y_, double yaw_) : x(x_), y(y_), yaw(normalize_angle(yaw_)) {}

Pose2D Pose2D::compose(const Pose2D& o) const {
  const Point2 p = apply({o.x, o.y});
  return {p.x, p.y, yaw + o.yaw};
}

Pose2D Pose2D::inverse() const {
  const double c = std::cos(yaw), s = std::sin(yaw);
  return {-(c * x + s * y), -(-s * x + c * y), -yaw};
}

Point2 Pose2D::apply(Point2 p) const {
  const double c = std::cos(yaw), s = std::sin(yaw);
  return {x + c * p.x - s * p.y, y + s * p.x + c * p.y};
}

void GridSpec::validate() const {
  if (rows == 0 || cols == 0) throw Error(ErrorKind::Config, "grid rows and cols must be positive");
  if (!(resolution > 0.0)) throw Error(ErrorKind::Config, "grid resolution must be positive");
}

GridSpec GridSpec::downsampled(std::size_t stride) const {
  GridSpec g = *this;
  g.rows = (rows + stride - 1) / stride;
  g.cols = (cols + stride - 1) / stride;
  g.resolution = resolution * static_cast<double>(stride);
  // A padded stride-s conv centers output cell i on input cell s*i.
  const double s = static_cast<double>(stride);
  const double dx = 0.5 * resolution * ((static_cast<double>(g.rows) - 1.0) * s - (static_cast<double>(rows) - 1.0));
  const double dy = 0.5 * resolution * ((static_cast<double>(g.cols) - 1.0) * s - (static_cast<double>(cols) - 1.0));
  g.origin = origin.compose(Pose2D{dx, dy, 0.0});
  return g;
}

Point2 GridSpec::cell_to_vehicle(double i, double j) const { return cell_affine(*this).apply({i, j}); }

Point2 GridSpec::vehicle_to_cell(Point2 p) const { return cell_affine(*this).inverse().apply(p); }

bool GridSpec::contains(Point2 vehicle_point) const {
  const Point2 c = vehicle_to_cell(vehicle_point);
  return c.x >= -0.5 && c.x < static_cast<double>(rows) - 0.5 && c.y >= -0.5 &&
         c.y < static_cast<double>(cols) - 0.5;
}

Point2 Affine2D::apply(Point2 p) const {
  return {m[0] * p.x + m[1] * p.y + m[2], m[3] * p.x + m[4] * p.y + m[5]};
}

Affine2D Affine2D::inverse() const {
  const double d = det();
  if (!(std::abs(d) >= 1e-12)) throw Error(ErrorKind::DegenerateAffine, "affine determinant is ~0");
  const double a = m[4] / d, b = -m[1] / d, c = -m[3] / d, e = m[0] / d;
  return Affine2D{{a, b, -(a * m[2] + b * m[5]), c, e, -(c * m[2] + e * m[5])}};
}

Affine2D Affine2D::compose(const Affine2D& o) const {
  return Affine2D{{m[0] * o.m[0] + m[1] * o.m[3], m[0] * o.m[1] + m[1] * o.m[4],
                   m[0] * o.m[2] + m[1] * o.m[5] + m[2], m[3] * o.m[0] + m[4] * o.m[3],
                   m[3] * o.m[1] + m[4] * o.m[4], m[3] * o.m[2] + m[4] * o.m[5] + m[5]}};
}

Affine2D relative_transform(const Pose2D& sender, const GridSpec& sender_grid, const Pose2D& ego,
                            const GridSpec& ego_grid) {
  const Affine2D sender_cells_to_world = pose_affine(sender).compose(cell_affine(sender_grid));
  const Affine2D world_to_ego_cells = pose_affine(ego).compose(cell_affine(ego_grid)).inverse();
  return world_to_ego_cells.compose(sender_cells_to_world);
}

OverlapMask OverlapMask::all(std::size_t rows, std::size_t cols, bool value) {
  return {rows, cols, std::vector<std::uint8_t>(rows * cols, value ? 1 : 0)};
}

std::size_t OverlapMask::count() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

double OverlapMask::fraction() const {
  return valid.empty() ? 0.0 : static_cast<double>(count()) / static_cast<double>(valid.size());
}

OverlapMask overlap_mask(const GridSpec& ego_grid, const GridSpec& sender_grid, const Affine2D& A) {
  const Affine2D inv = A.inverse();
  OverlapMask mask = OverlapMask::all(ego_grid.rows, ego_grid.cols, false);
  Sample s;
  for (std::size_t i = 0; i < ego_grid.rows; ++i) {
    for (std::size_t j = 0; j < ego_grid.cols; ++j) {
      const Point2 src = inv.apply({static_cast<double>(i), static_cast<double>(j)});
      mask.valid[i * ego_grid.cols + j] = footprint(src, sender_grid.rows, sender_grid.cols, s) ? 1 : 0;
    }
  }
  return mask;
}

ad::Tensor warp_tensor(const ad::Tensor& src, const Affine2D& A, std::size_t out_rows,
                       std::size_t out_cols, OverlapMask* mask_out) {
  if (src.rank() != 3) {
    throw Error(ErrorKind::ShapeMismatch, "warp expects [C,H,W], got " + ad::shape_str(src.shape()));
  }
  const Affine2D inv = A.inverse();
  const std::size_t C = src.dim(0), rows = src.dim(1), cols = src.dim(2);
  const std::size_t plane_in = rows * cols, plane_out = out_rows * out_cols;

  // Per-cell sampling plan; shared by every channel and by backward.
  std::vector<Sample> plan(plane_out);
  std::vector<std::uint8_t> valid(plane_out, 0);
  for (std::size_t i = 0; i < out_rows; ++i) {
    for (std::size_t j = 0; j < out_cols; ++j) {
      const std::size_t k = i * out_cols + j;
      const Point2 s = inv.apply({static_cast<double>(i), static_cast<double>(j)});
      valid[k] = footprint(s, rows, cols, plan[k]) ? 1 : 0;
    }
  }

  const auto sv = src.data();
  std::vector<double> out(C * plane_out, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    const double* in = sv.data() + c * plane_in;
    double* o = out.data() + c * plane_out;
    for (std::size_t k = 0; k < plane_out; ++k) {
      if (!valid[k]) continue;
      const Sample& s = plan[k];
      o[k] = s.w[0] * in[s.idx[0]] + s.w[1] * in[s.idx[1]] + s.w[2] * in[s.idx[2]] +
             s.w[3] * in[s.idx[3]];
    }
  }
  if (mask_out) *mask_out = OverlapMask{out_rows, out_cols, valid};

  return ad::make_result(
      {C, out_rows, out_cols}, std::move(out), {src},
      [C, plane_in, plane_out, plan = std::move(plan), valid = std::move(valid)](ad::Node& self) {
        double* dsrc = ad::input_grad(self, 0);
        for (std::size_t c = 0; c < C; ++c) {
          double* d = dsrc + c * plane_in;
          const double* g = self.grad.data() + c * plane_out;
          for (std::size_t k = 0; k < plane_out; ++k) {
            if (!valid[k]) continue;
            const Sample& s = plan[k];
            for (int q = 0; q < 4; ++q) d[s.idx[q]] += s.w[q] * g[k];
          }
        }
      });
}

WarpResult warp_feature_map(const BEVFeatureMap& f, const Pose2D& ego_pose, const GridSpec& ego_grid) {
  return warp_feature_map(f, relative_transform(f.pose, f.grid, ego_pose, ego_grid), ego_pose, ego_grid);
}

WarpResult warp_feature_map(const BEVFeatureMap& f, const Affine2D& A, const Pose2D& ego_pose,
                            const GridSpec& ego_grid) {
  WarpResult r;
  r.map.data = warp_tensor(f.data, A, ego_grid.rows, ego_grid.cols, &r.overlap);
  r.map.pose = ego_pose;
  r.map.grid = ego_grid;
  r.map.source_id = f.source_id;
  return r;
}

}  // namespace sicp::geom
