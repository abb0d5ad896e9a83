#include "sicp/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "sicp/error.hpp"
#include "sicp/hash.hpp"

namespace sicp::pipeline {

namespace {

constexpr std::size_t kCode = 5;
constexpr std::size_t kRotations = 2;

double log_sigmoid(double z) { return z >= 0.0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void require_head_layout(const ad::Tensor& t, std::size_t channels, const Targets& targets, const char* what) {
  if (t.rank() != 3 || t.dim(0) != channels || t.numel() / channels * kRotations != targets.labels.size()) {
    throw Error(ErrorKind::ShapeMismatch, std::string(what) + " does not match the anchor targets");
  }
}

}  // namespace

void ModelConfig::validate() const {
  grid.validate();
  dpnet.validate();
  if (extractor.widths.empty()) throw Error(ErrorKind::Config, "extractor needs at least one block");
  if (extractor.downsample != 1 && extractor.downsample != 2) {
    throw Error(ErrorKind::Config, "extractor downsample must be 1 or 2");
  }
  if (extractor.stride_block >= extractor.widths.size()) {
    throw Error(ErrorKind::Config, "extractor stride_block is out of range");
  }
  if (extractor.kernel % 2 == 0) throw Error(ErrorKind::Config, "extractor kernel must be odd");
  if (head_kernel % 2 == 0) throw Error(ErrorKind::Config, "head kernel must be odd");
  if (extractor.out_channels() != dpnet.channels) {
    throw Error(ErrorKind::Config, "extractor output width " + std::to_string(extractor.out_channels()) +
                                       " differs from dpnet channels " + std::to_string(dpnet.channels));
  }
  if (!(anchor.width > 0.0 && anchor.length > 0.0)) throw Error(ErrorKind::Config, "anchor size must be positive");
}

std::uint64_t ModelConfig::architecture_hash() const {
  std::ostringstream os;
  os.precision(17);
  os << "grid " << grid.rows << " " << grid.cols << " " << grid.resolution << " " << grid.origin.x << " "
     << grid.origin.y << " " << grid.origin.yaw << "\nextractor " << extractor.in_channels << " "
     << extractor.stride_block << " " << extractor.kernel << " " << extractor.downsample;
  for (auto w : extractor.widths) os << " " << w;
  os << "\ndpnet " << dpnet.channels << " " << dpnet::to_string(dpnet.reduction) << " " << dpnet.layers << " "
     << dpnet.kernel << " " << dpnet.complementary << " " << dpnet::to_string(dpnet.fusion) << "\nanchor "
     << anchor.width << " " << anchor.length << "\nhead " << head_kernel << "\n";
  return fnv1a64(os.str());
}

ad::Tensor Extractor::forward(const ad::Tensor& raster) {
  ad::Tensor x = raster;
  for (auto& b : blocks) x = b.forward(x);
  return x;
}

HeadOutput Head::forward(const ad::Tensor& features) const {
  return {ad::conv2d(features, cls), ad::conv2d(features, reg)};
}

Model Model::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  Model m;
  m.config = cfg;
  std::size_t in = cfg.extractor.in_channels;
  for (std::size_t b = 0; b < cfg.extractor.widths.size(); ++b) {
    const std::size_t out = cfg.extractor.widths[b];
    const std::size_t stride = b == cfg.extractor.stride_block ? cfg.extractor.stride() : 1;
    m.extractor.blocks.push_back({nn::make_conv(out, in, cfg.extractor.kernel, stride, rng),
                                  ad::BatchNormParams::identity(out)});
    in = out;
  }
  m.dpnet = dpnet::DPNetParams::init(cfg.dpnet, rng);

  // Small head weights; objectness bias at a 1% prior.
  const std::size_t C = cfg.extractor.out_channels();
  std::normal_distribution<double> small(0.0, 0.01);
  auto head_conv = [&](std::size_t out, double bias) {
    const std::size_t k = cfg.head_kernel;
    std::vector<double> w(out * C * k * k);
    for (double& v : w) v = small(rng);
    ad::ConvParams p;
    p.weight = ad::Tensor::from({out, C, k, k}, std::move(w), true);
    p.bias = ad::Tensor::full({out}, bias, true);
    return p;
  };
  m.head.cls = head_conv(kRotations, -std::log((1.0 - 0.01) / 0.01));
  m.head.reg = head_conv(kRotations * kCode, 0.0);
  return m;
}

std::vector<nn::NamedTensor> Model::named_parameters() const {
  std::vector<nn::NamedTensor> out;
  for (std::size_t b = 0; b < extractor.blocks.size(); ++b) {
    nn::collect("extractor.block" + std::to_string(b) + ".conv", extractor.blocks[b].conv, out);
    nn::collect("extractor.block" + std::to_string(b) + ".bn", extractor.blocks[b].bn, out);
  }
  for (auto& t : dpnet.named_parameters()) out.push_back(t);
  nn::collect("head.cls", head.cls, out);
  nn::collect("head.reg", head.reg, out);
  return out;
}

std::vector<nn::NamedBuffer> Model::named_buffers() {
  std::vector<nn::NamedBuffer> out;
  for (std::size_t b = 0; b < extractor.blocks.size(); ++b) {
    nn::collect_buffers("extractor.block" + std::to_string(b) + ".bn", extractor.blocks[b].bn, out);
  }
  for (auto& b : dpnet.named_buffers()) out.push_back(b);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : named_parameters()) n += t.tensor.numel();
  return n;
}

void Model::set_training(bool training) {
  for (auto& b : extractor.blocks) b.bn.training = training;
  dpnet.set_training(training);
}

geom::BEVFeatureMap Model::extract(const ad::Tensor& raster, const geom::Pose2D& pose, std::uint32_t source_id) {
  if (raster.rank() != 3 || raster.dim(0) != config.extractor.in_channels || raster.dim(1) != config.grid.rows ||
      raster.dim(2) != config.grid.cols) {
    throw Error(ErrorKind::ShapeMismatch, "raster " + ad::shape_str(raster.shape()) + " does not match the model grid");
  }
  return {extractor.forward(raster), pose, config.feature_grid(), source_id};
}

AnchorGrid make_anchors(const geom::GridSpec& feature_grid, const AnchorConfig& cfg) {
  AnchorGrid g;
  g.rows = feature_grid.rows;
  g.cols = feature_grid.cols;
  g.anchors.reserve(kRotations * g.rows * g.cols);
  for (std::size_t a = 0; a < kRotations; ++a) {
    for (std::size_t i = 0; i < g.rows; ++i) {
      for (std::size_t j = 0; j < g.cols; ++j) {
        const geom::Point2 c = feature_grid.cell_to_vehicle(static_cast<double>(i), static_cast<double>(j));
        g.anchors.push_back({c.x, c.y, cfg.width, cfg.length,
                             normalize_half_angle(feature_grid.origin.yaw + static_cast<double>(a) * std::numbers::pi / 2),
                             1.0});
      }
    }
  }
  return g;
}

BoxCode encode_box(const DetectionBox& box, const DetectionBox& anchor) {
  const double da = std::hypot(anchor.w, anchor.l);
  return {(box.x - anchor.x) / da, (box.y - anchor.y) / da, std::log(box.w / anchor.w), std::log(box.l / anchor.l),
          normalize_half_angle(box.yaw - anchor.yaw)};
}

DetectionBox decode_box(const BoxCode& code, const DetectionBox& anchor) {
  const double da = std::hypot(anchor.w, anchor.l);
  DetectionBox b;
  b.x = anchor.x + code[0] * da;
  b.y = anchor.y + code[1] * da;
  b.w = anchor.w * std::exp(code[2]);
  b.l = anchor.l * std::exp(code[3]);
  b.yaw = normalize_half_angle(anchor.yaw + code[4]);
  return b;
}

Targets assign_targets(const AnchorGrid& anchors, const std::vector<DetectionBox>& boxes, double pos_iou,
                       double neg_iou) {
  const std::size_t n = anchors.size();
  Targets t;
  t.labels.assign(n, 0);
  t.codes.assign(n * kCode, 0.0);
  std::vector<double> best_iou(n, 0.0);
  std::vector<std::size_t> best_box(n, 0);
  std::vector<std::size_t> forced(boxes.size(), n);
  std::vector<double> forced_iou(boxes.size(), 0.0);

  for (std::size_t k = 0; k < n; ++k) {
    const DetectionBox& a = anchors.anchors[k];
    for (std::size_t b = 0; b < boxes.size(); ++b) {
      const double iou = rotated_iou(a, boxes[b]);
      if (iou > best_iou[k]) {
        best_iou[k] = iou;
        best_box[k] = b;
      }
      if (iou > forced_iou[b]) {
        forced_iou[b] = iou;
        forced[b] = k;
      }
    }
  }
  for (std::size_t k = 0; k < n; ++k) {
    if (best_iou[k] >= pos_iou) t.labels[k] = 1;
    else if (best_iou[k] >= neg_iou) t.labels[k] = -1;
  }
  for (std::size_t b = 0; b < boxes.size(); ++b) {
    if (forced[b] < n) {
      t.labels[forced[b]] = 1;
      best_box[forced[b]] = b;
    }
  }
  for (std::size_t k = 0; k < n; ++k) {
    if (t.labels[k] != 1) continue;
    ++t.positives;
    const BoxCode c = encode_box(boxes[best_box[k]], anchors.anchors[k]);
    std::copy(c.begin(), c.end(), t.codes.begin() + static_cast<std::ptrdiff_t>(k * kCode));
  }
  return t;
}

double focal_term(double p, bool positive, double alpha, double gamma) {
  return positive ? -alpha * std::pow(1.0 - p, gamma) * std::log(p)
                  : -(1.0 - alpha) * std::pow(p, gamma) * std::log(1.0 - p);
}

double smooth_l1(double r) {
  const double a = std::abs(r);
  return a < 1.0 ? 0.5 * r * r : a - 0.5;
}

ad::Tensor focal_loss(const ad::Tensor& cls, const Targets& t, const LossConfig& cfg) {
  require_head_layout(cls, kRotations, t, "classification map");
  const auto z = cls.data();
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, t.positives));
  const double alpha = cfg.alpha, gamma = cfg.gamma;
  double total = 0.0;
  std::vector<double> dz(z.size(), 0.0);
  for (std::size_t k = 0; k < z.size(); ++k) {
    const std::int8_t label = t.labels[k];
    if (label < 0) continue;
    const double p = sigmoid(z[k]);
    if (label == 1) {
      const double w = std::pow(1.0 - p, gamma);
      total += -alpha * w * log_sigmoid(z[k]);
      dz[k] = alpha * w * (gamma * p * log_sigmoid(z[k]) - (1.0 - p));
    } else {
      const double w = std::pow(p, gamma);
      const double log_q = log_sigmoid(-z[k]);
      total += -(1.0 - alpha) * w * log_q;
      dz[k] = -(1.0 - alpha) * w * (gamma * (1.0 - p) * log_q - p);
    }
  }
  for (double& d : dz) d *= norm;
  return ad::make_result({1}, {total * norm}, {cls}, [dz = std::move(dz)](ad::Node& self) {
    double* g = ad::input_grad(self, 0);
    const double up = self.grad[0];
    for (std::size_t k = 0; k < dz.size(); ++k) g[k] += up * dz[k];
  });
}

ad::Tensor regression_loss(const ad::Tensor& reg, const Targets& t) {
  require_head_layout(reg, kRotations * kCode, t, "regression map");
  const std::size_t plane = reg.dim(1) * reg.dim(2);
  const auto r = reg.data();
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, t.positives));
  double total = 0.0;
  std::vector<double> dr(r.size(), 0.0);
  for (std::size_t k = 0; k < t.labels.size(); ++k) {
    if (t.labels[k] != 1) continue;
    const std::size_t a = k / plane, cell = k % plane;
    for (std::size_t c = 0; c < kCode; ++c) {
      const std::size_t idx = (a * kCode + c) * plane + cell;
      const double diff = r[idx] - t.codes[k * kCode + c];
      double res = diff, dres = 1.0;
      if (c == 4) {
        res = std::sin(diff);
        dres = std::cos(diff);
      }
      total += smooth_l1(res);
      const double dsl = std::abs(res) < 1.0 ? res : (res > 0.0 ? 1.0 : -1.0);
      dr[idx] = norm * dsl * dres;
    }
  }
  return ad::make_result({1}, {total * norm}, {reg}, [dr = std::move(dr)](ad::Node& self) {
    double* g = ad::input_grad(self, 0);
    const double up = self.grad[0];
    for (std::size_t k = 0; k < dr.size(); ++k) g[k] += up * dr[k];
  });
}

Loss compute_loss(const HeadOutput& out, const Targets& t, const LossConfig& cfg) {
  const ad::Tensor lc = focal_loss(out.cls, t, cfg);
  const ad::Tensor lr = regression_loss(out.reg, t);
  Loss l;
  l.cls = lc.item();
  l.reg = lr.item();
  l.total = ad::add(lc, ad::affine(lr, cfg.reg_weight, 0.0));
  return l;
}

std::vector<DetectionBox> visible_ground_truth(const sim::SyntheticScene& scene, const geom::GridSpec& grid,
                                               const SampleOptions& opts) {
  const double range = opts.max_range > 0.0 ? opts.max_range
                                            : std::hypot(grid.rows * grid.resolution, grid.cols * grid.resolution);
  // Hits only count when they land inside the observing vehicle's own grid.
  auto in_grid_counts = [&](const geom::Pose2D& sensor) {
    const sim::PointSet pts = sim::raycast_visible_points(scene.objects, sensor, opts.n_rays, range);
    sim::PointSet kept;
    for (std::size_t k = 0; k < pts.size(); ++k) {
      if (grid.contains(pts.points[k])) {
        kept.points.push_back(pts.points[k]);
        kept.object_ids.push_back(pts.object_ids[k]);
      }
    }
    return sim::visible_counts(kept, scene.objects);
  };
  const auto ego = in_grid_counts(scene.ego_pose);
  const auto snd = in_grid_counts(scene.sender_pose);
  const geom::Pose2D to_ego = scene.ego_pose.inverse();
  std::vector<DetectionBox> out;
  for (std::size_t k = 0; k < scene.objects.size(); ++k) {
    DetectionBox b = scene.objects[k].box.transformed(to_ego);
    if (!grid.contains({b.x, b.y})) continue;
    if (ego[k] + snd[k] < opts.min_points) continue;
    b.score = 1.0;
    out.push_back(b);
  }
  return out;
}

TrainingSample make_sample(const sim::SyntheticScene& scene, const ModelConfig& cfg, const AnchorGrid& anchors,
                           const SampleOptions& opts) {
  const double range = opts.max_range > 0.0
                           ? opts.max_range
                           : std::hypot(cfg.grid.rows * cfg.grid.resolution, cfg.grid.cols * cfg.grid.resolution);
  TrainingSample s;
  s.ego_pose = scene.ego_pose;
  s.sender_pose = scene.sender_pose;
  s.ego_raster = sim::rasterize_bev(sim::raycast_visible_points(scene, scene.ego_pose, opts.n_rays, range), cfg.grid);
  s.sender_raster =
      sim::rasterize_bev(sim::raycast_visible_points(scene, scene.sender_pose, opts.n_rays, range), cfg.grid);
  s.ground_truth = visible_ground_truth(scene, cfg.grid, opts);
  s.targets = assign_targets(anchors, s.ground_truth);
  s.seed = scene.seed;
  return s;
}

void Adam::step(std::span<const nn::NamedTensor> params) {
  State& s = state_;
  if (s.m.size() != params.size()) {
    s.m.clear();
    s.v.clear();
    for (const auto& p : params) {
      s.m.emplace_back(p.tensor.numel(), 0.0);
      s.v.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  ++s.step;
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    ad::Tensor t = params[pi].tensor;
    if (!t.has_grad()) continue;
    auto values = t.mutable_data();
    const auto grad = t.grad();
    auto& m = s.m[pi];
    auto& v = s.v[pi];
    for (std::size_t k = 0; k < values.size(); ++k) {
      m[k] = s.beta1 * m[k] + (1.0 - s.beta1) * grad[k];
      v[k] = s.beta2 * v[k] + (1.0 - s.beta2) * grad[k] * grad[k];
      values[k] -= s.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + s.eps);
    }
    t.zero_grad();
  }
}

JointLoss joint_loss(Model& model, const TrainingSample& sample, double lambda, const LossConfig& loss_cfg) {
  const geom::BEVFeatureMap ego = model.extract(sample.ego_raster, sample.ego_pose, 0);
  const Loss ind = compute_loss(model.head.forward(ego.data), sample.targets, loss_cfg);

  JointLoss out;
  out.parts.individual = ind.total.item();
  out.total = ad::affine(ind.total, lambda, 0.0);
  if (lambda < 1.0) {
    const geom::BEVFeatureMap sender = model.extract(sample.sender_raster, sample.sender_pose, 1);
    geom::WarpResult w = geom::warp_feature_map(sender, sample.ego_pose, ego.grid);
    const ad::Tensor fused = dpnet::forward_dual(ego, dpnet::ReceivedFeatures{w.map, w.overlap}, model.dpnet);
    const Loss coop = compute_loss(model.head.forward(fused), sample.targets, loss_cfg);
    out.parts.cooperative = coop.total.item();
    out.total = ad::add(out.total, ad::affine(coop.total, 1.0 - lambda, 0.0));
  }
  out.parts.total = out.total.item();
  return out;
}

StepLoss joint_step(Model& model, const TrainingSample& sample, double lambda, const LossConfig& loss_cfg) {
  JointLoss l = joint_loss(model, sample, lambda, loss_cfg);
  if (!std::isfinite(l.parts.total)) {
    throw Error(ErrorKind::NumericalFailure, "non-finite loss on sample seed " + std::to_string(sample.seed));
  }
  l.total.backward();
  return l.parts;
}

std::vector<EpochRecord> train_joint(Model& model, Adam& optimizer, std::span<const TrainingSample> samples,
                                     const TrainConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch) {
  if (!(cfg.lambda >= 0.0 && cfg.lambda <= 1.0)) throw Error(ErrorKind::Config, "train lambda must lie in [0,1]");
  optimizer.state().lr = cfg.learning_rate;
  model.set_training(true);
  const auto params = model.named_parameters();
  for (const auto& p : params) ad::Tensor(p.tensor).zero_grad();

  std::vector<EpochRecord> records;
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(cfg.shuffle_seed);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    // Fisher-Yates with explicit draws keeps the order identical across standard libraries.
    for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[rng() % k]);
    EpochRecord rec;
    rec.epoch = e;
    for (std::size_t idx : order) {
      const StepLoss l = joint_step(model, samples[idx], cfg.lambda, cfg.loss);
      optimizer.step(params);
      rec.mean_total += l.total;
      rec.mean_individual += l.individual;
      rec.mean_cooperative += l.cooperative;
      ++rec.steps;
    }
    if (rec.steps) {
      rec.mean_total /= static_cast<double>(rec.steps);
      rec.mean_individual /= static_cast<double>(rec.steps);
      rec.mean_cooperative /= static_cast<double>(rec.steps);
    }
    records.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  model.set_training(false);
  return records;
}

std::vector<DetectionBox> decode_detections(const HeadOutput& out, const AnchorGrid& anchors, double score_threshold) {
  const std::size_t plane = anchors.rows * anchors.cols;
  const auto cls = out.cls.data();
  const auto reg = out.reg.data();
  std::vector<DetectionBox> boxes;
  for (std::size_t k = 0; k < anchors.size(); ++k) {
    const double score = sigmoid(cls[k]);
    if (score < score_threshold) continue;
    const std::size_t a = k / plane, cell = k % plane;
    BoxCode code;
    for (std::size_t c = 0; c < kCode; ++c) code[c] = reg[(a * kCode + c) * plane + cell];
    DetectionBox b = decode_box(code, anchors.anchors[k]);
    b.score = score;
    boxes.push_back(b);
  }
  return boxes;
}

std::vector<DetectionBox> infer(Model& model, const ad::Tensor& ego_raster, const geom::Pose2D& ego_pose,
                                const std::optional<comms::FeatureMessage>& sender, const InferenceConfig& cfg) {
  model.set_training(false);
  const geom::BEVFeatureMap ego = model.extract(ego_raster.detach(), ego_pose, 0);
  std::optional<dpnet::ReceivedFeatures> received;
  if (sender) {
    const geom::BEVFeatureMap sent = comms::to_feature_map(*sender);
    if (sent.data.shape() != ego.data.shape()) {
      throw Error(ErrorKind::ShapeMismatch, "received features " + ad::shape_str(sent.data.shape()) +
                                                " do not match local " + ad::shape_str(ego.data.shape()));
    }
    geom::WarpResult w = geom::warp_feature_map(sent, ego_pose, ego.grid);
    received = dpnet::ReceivedFeatures{std::move(w.map), std::move(w.overlap)};
  }
  const ad::Tensor features = dpnet::forward_dual(ego, received, model.dpnet);
  const AnchorGrid anchors = make_anchors(ego.grid, model.config.anchor);
  return apply_nms(decode_detections(model.head.forward(features), anchors, cfg.score_threshold), cfg.nms_iou);
}

}  // namespace sicp::pipeline
