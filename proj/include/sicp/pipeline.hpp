#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "sicp/boxes.hpp"
#include "sicp/comms.hpp"
#include "sicp/dpnet.hpp"
#include "sicp/geometry.hpp"
#include "sicp/nn.hpp"
#include "sicp/scene.hpp"

namespace sicp::pipeline {

struct ExtractorConfig {
  std::size_t in_channels = 3;
  /// Output width of each conv+BN+ReLU block; the last one is the feature width C.
  std::vector<std::size_t> widths{16, 24, 32};
  /// 1 keeps features at raster resolution; 2 strides block `stride_block`.
  std::size_t downsample = 1;
  std::size_t stride_block = 1;
  std::size_t kernel = 3;

  std::size_t out_channels() const { return widths.back(); }
  std::size_t stride() const { return downsample; }
};

struct AnchorConfig {
  double width = 2.0;
  double length = 4.5;
};

struct ModelConfig {
  geom::GridSpec grid{};
  ExtractorConfig extractor{};
  dpnet::DPNetConfig dpnet{};
  AnchorConfig anchor{};
  /// Spatial kernel of the cls/reg convs.
  std::size_t head_kernel = 3;

  void validate() const;
  geom::GridSpec feature_grid() const { return grid.downsampled(extractor.stride()); }
  /// Stable hash of everything that determines parameter shapes and semantics.
  std::uint64_t architecture_hash() const;
};

struct Extractor {
  std::vector<nn::ConvBlock> blocks;
  ad::Tensor forward(const ad::Tensor& raster);
};

struct HeadOutput {
  ad::Tensor cls;  // [2, H', W'] objectness logits, one channel per anchor rotation
  ad::Tensor reg;  // [10, H', W'] anchor a uses channels 5a..5a+4: dx, dy, dw, dl, dyaw
};

struct Head {
  ad::ConvParams cls;
  ad::ConvParams reg;
  HeadOutput forward(const ad::Tensor& features) const;
};

/// Feature extractor, DP-Net and the single detection head shared by both
/// perception modes.
class Model {
 public:
  ModelConfig config;
  Extractor extractor;
  dpnet::DPNetParams dpnet;
  Head head;

  static Model init(const ModelConfig& cfg, std::uint64_t seed);

  std::vector<nn::NamedTensor> named_parameters() const;
  std::vector<nn::NamedBuffer> named_buffers();
  std::size_t parameter_count() const;
  void set_training(bool training);

  geom::BEVFeatureMap extract(const ad::Tensor& raster, const geom::Pose2D& pose, std::uint32_t source_id);
};

struct AnchorGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  /// Index (a * rows + i) * cols + j for rotation a in {0, pi/2}.
  std::vector<DetectionBox> anchors;

  std::size_t size() const { return anchors.size(); }
};

AnchorGrid make_anchors(const geom::GridSpec& feature_grid, const AnchorConfig& cfg);

using BoxCode = std::array<double, 5>;

/// (x-xa)/da, (y-ya)/da, log(w/wa), log(l/la), yaw-yaw_a with da the anchor diagonal.
BoxCode encode_box(const DetectionBox& box, const DetectionBox& anchor);
DetectionBox decode_box(const BoxCode& code, const DetectionBox& anchor);

struct Targets {
  std::vector<std::int8_t> labels;  // 1 positive, 0 negative, -1 ignored
  std::vector<double> codes;        // 5 per anchor, meaningful on positives
  std::size_t positives = 0;
};

/// IoU >= pos_iou positive, < neg_iou negative, each box's best anchor forced positive.
Targets assign_targets(const AnchorGrid& anchors, const std::vector<DetectionBox>& boxes, double pos_iou = 0.6,
                       double neg_iou = 0.45);

struct LossConfig {
  double alpha = 0.25;
  double gamma = 2.0;
  double reg_weight = 2.0;
};

double focal_term(double p, bool positive, double alpha = 0.25, double gamma = 2.0);
double smooth_l1(double residual);

/// Focal loss over non-ignored anchors, normalised by max(1, positives).
ad::Tensor focal_loss(const ad::Tensor& cls, const Targets& t, const LossConfig& cfg = {});
/// Smooth-L1 over positive anchors with sin(dyaw_pred - dyaw_target) for the
/// angle, normalised by max(1, positives).
ad::Tensor regression_loss(const ad::Tensor& reg, const Targets& t);

struct Loss {
  ad::Tensor total;
  double cls = 0.0;
  double reg = 0.0;
};

Loss compute_loss(const HeadOutput& out, const Targets& t, const LossConfig& cfg = {});

/// Everything one training step consumes, in the ego frame.
struct TrainingSample {
  ad::Tensor ego_raster;
  ad::Tensor sender_raster;
  geom::Pose2D ego_pose;
  geom::Pose2D sender_pose;
  std::vector<DetectionBox> ground_truth;
  Targets targets;
  std::uint64_t seed = 0;
};

struct SampleOptions {
  std::size_t n_rays = 720;
  double max_range = 0.0;
  /// Minimum hits (from either vehicle, inside its own grid) for a box to count as ground truth.
  std::size_t min_points = 1;
};

/// Boxes inside the ego grid seen by at least one vehicle.
std::vector<DetectionBox> visible_ground_truth(const sim::SyntheticScene& scene, const geom::GridSpec& grid,
                                               const SampleOptions& opts);

TrainingSample make_sample(const sim::SyntheticScene& scene, const ModelConfig& cfg, const AnchorGrid& anchors,
                           const SampleOptions& opts);

class Adam {
 public:
  struct State {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
  };

  explicit Adam(double lr = 1e-3) { state_.lr = lr; }
  explicit Adam(State state) : state_(std::move(state)) {}

  /// Applies one update from the accumulated grads, then clears them.
  void step(std::span<const nn::NamedTensor> params);
  const State& state() const { return state_; }
  State& state() { return state_; }

 private:
  State state_;
};

struct TrainConfig {
  std::size_t epochs = 6;
  double learning_rate = 1e-3;
  /// total = lambda * L_individual + (1 - lambda) * L_cooperative
  double lambda = 0.5;
  std::uint64_t shuffle_seed = 0;
  LossConfig loss{};
};

struct StepLoss {
  double total = 0.0;
  double individual = 0.0;
  double cooperative = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double mean_total = 0.0;
  double mean_individual = 0.0;
  double mean_cooperative = 0.0;
};

struct JointLoss {
  ad::Tensor total;
  StepLoss parts;
};

/// Builds lambda * L_individual + (1 - lambda) * L_cooperative without running backward.
JointLoss joint_loss(Model& model, const TrainingSample& sample, double lambda, const LossConfig& loss_cfg = {});

/// One joint step: individual branch on ego features, cooperative branch on
/// ego + warped sender features, one backward pass through the weighted sum.
/// With lambda == 1 the cooperative branch is not built.
/// Leaves gradients accumulated; the caller applies the optimizer.
StepLoss joint_step(Model& model, const TrainingSample& sample, double lambda, const LossConfig& loss_cfg = {});

/// Throws NumericalFailure if a loss turns NaN/Inf.
std::vector<EpochRecord> train_joint(Model& model, Adam& optimizer, std::span<const TrainingSample> samples,
                                     const TrainConfig& cfg,
                                     const std::function<void(const EpochRecord&)>& on_epoch = {});

struct InferenceConfig {
  double score_threshold = 0.3;
  double nms_iou = 0.15;
};

std::vector<DetectionBox> decode_detections(const HeadOutput& out, const AnchorGrid& anchors,
                                            double score_threshold);

/// Detections in the ego vehicle frame. Without a message this is the pure
/// individual pipeline; with one, the sender map is warped and fused.
std::vector<DetectionBox> infer(Model& model, const ad::Tensor& ego_raster, const geom::Pose2D& ego_pose,
                                const std::optional<comms::FeatureMessage>& sender, const InferenceConfig& cfg);

}  // namespace sicp::pipeline
