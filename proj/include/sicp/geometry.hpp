#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "sicp/tensor.hpp"

namespace sicp::geom {

/// Wraps an angle into (-pi, pi].
double normalize_angle(double a);

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

/// Planar pose: meters and radians, yaw kept in (-pi, pi].
struct Pose2D {
  double x = 0.0;
  double y = 0.0;
  double yaw = 0.0;

  Pose2D() = default;
  Pose2D(double x_, double y_, double yaw_);

  /// this ∘ other: `other` expressed in this pose's frame, lifted to the parent frame.
  Pose2D compose(const Pose2D& other) const;
  Pose2D inverse() const;
  Point2 apply(Point2 p) const;

  friend bool operator==(const Pose2D&, const Pose2D&) = default;
};

/// Rows run along the vehicle's x axis (forward), columns along y (left).
/// Cell (i, j) has its center at x = (i - (rows-1)/2) * res, y = (j - (cols-1)/2) * res
/// in the frame given by `origin`, which is itself relative to the vehicle.
struct GridSpec {
  std::size_t rows = 128;
  std::size_t cols = 64;
  double resolution = 1.0;
  Pose2D origin{};

  void validate() const;
  std::size_t cells() const { return rows * cols; }
  /// Grid of a padded stride-`stride` conv output: coarser cells centered on
  /// input cells 0, stride, 2*stride, ...
  GridSpec downsampled(std::size_t stride) const;
  /// Continuous cell coordinates -> vehicle-frame meters.
  Point2 cell_to_vehicle(double i, double j) const;
  /// Vehicle-frame meters -> continuous cell coordinates (cell centers are integers).
  Point2 vehicle_to_cell(Point2 p) const;
  bool contains(Point2 vehicle_point) const;

  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

/// 2x3 affine map [a b tx; c d ty] acting on (i, j) cell coordinates.
struct Affine2D {
  std::array<double, 6> m{1, 0, 0, 0, 1, 0};

  static Affine2D identity() { return {}; }
  Point2 apply(Point2 p) const;
  double det() const { return m[0] * m[4] - m[1] * m[3]; }
  /// Throws DegenerateAffine when |det| < 1e-12.
  Affine2D inverse() const;
  /// (this ∘ other)(p) = this(other(p))
  Affine2D compose(const Affine2D& other) const;
};

/// Maps sender-grid cell coordinates into ego-grid cell coordinates.
Affine2D relative_transform(const Pose2D& sender, const GridSpec& sender_grid, const Pose2D& ego,
                            const GridSpec& ego_grid);

struct OverlapMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> valid;

  static OverlapMask all(std::size_t rows, std::size_t cols, bool value);
  std::size_t count() const;
  double fraction() const;
  bool any() const { return count() > 0; }
};

/// True where the bilinear footprint of A^-1(i, j) lies entirely inside the sender grid.
OverlapMask overlap_mask(const GridSpec& ego_grid, const GridSpec& sender_grid, const Affine2D& A);

/// Feature map tied to the pose and grid of the vehicle that produced it.
struct BEVFeatureMap {
  ad::Tensor data;  // [C, rows, cols]
  Pose2D pose;
  GridSpec grid;
  std::uint32_t source_id = 0;
};

struct WarpResult {
  BEVFeatureMap map;
  OverlapMask overlap;
};

/// Inverse-mapped bilinear resampling of `src` into a target grid; cells
/// whose footprint leaves the source are zero and masked out. Differentiable
/// with respect to the source features.
ad::Tensor warp_tensor(const ad::Tensor& src, const Affine2D& A, std::size_t out_rows,
                       std::size_t out_cols, OverlapMask* mask_out = nullptr);

/// Warps a received map into the ego frame described by (ego_pose, ego_grid).
WarpResult warp_feature_map(const BEVFeatureMap& f, const Pose2D& ego_pose, const GridSpec& ego_grid);
WarpResult warp_feature_map(const BEVFeatureMap& f, const Affine2D& A, const Pose2D& ego_pose,
                            const GridSpec& ego_grid);

}  // namespace sicp::geom
