#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sicp/boxes.hpp"
#include "sicp/geometry.hpp"

namespace sicp::metrics {

using SceneBoxes = std::vector<std::vector<DetectionBox>>;

struct PRPoint {
  double precision = 0.0;
  double recall = 0.0;

  friend bool operator==(const PRPoint&, const PRPoint&) = default;
};

struct SceneCounts {
  std::uint64_t seed = 0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;

  friend bool operator==(const SceneCounts&, const SceneCounts&) = default;
};

struct APResult {
  double ap = 0.0;
  /// One point per prediction, in descending score order.
  std::vector<PRPoint> curve;
  std::vector<SceneCounts> scenes;
};

/// Greedy matching over all scenes in descending score (ties by scene, then
/// index); each prediction takes the best still-unmatched ground truth of its
/// scene with IoU >= iou_thresh. AP is the area under the all-point
/// interpolated precision-recall curve.
/// Throws UndefinedRecall when no scene holds a ground-truth box.
APResult average_precision(const SceneBoxes& preds, const SceneBoxes& gts, double iou_thresh,
                           const std::vector<std::uint64_t>& scene_seeds = {});

/// Sender predictions are moved into the ego frame through `sender_to_ego`,
/// merged with the ego's own and passed through rotated NMS.
std::vector<DetectionBox> late_fusion_baseline(const std::vector<DetectionBox>& ego_preds,
                                               const std::vector<DetectionBox>& sender_preds,
                                               const geom::Pose2D& sender_to_ego, double nms_iou);

struct EvalResult {
  std::string mode;
  double ap_50 = 0.0;
  double ap_70 = 0.0;
  std::vector<PRPoint> pr_50;
  std::vector<PRPoint> pr_70;
  std::vector<SceneCounts> scenes_50;
  std::vector<SceneCounts> scenes_70;
  std::uint64_t config_hash = 0;
  std::vector<std::uint64_t> seeds;

  /// FNV-1a over the canonical serialisation; equal results hash equal.
  std::uint64_t hash() const;
  std::string to_json() const;
};

EvalResult evaluate(const std::string& mode, const SceneBoxes& preds, const SceneBoxes& gts,
                    const std::vector<std::uint64_t>& seeds, std::uint64_t config_hash);

}  // namespace sicp::metrics
