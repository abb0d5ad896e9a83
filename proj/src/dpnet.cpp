#include "sicp/dpnet.hpp"

#include <algorithm>

#include "sicp/error.hpp"

namespace sicp::dpnet {

namespace {

void require_same_layout(const BEVFeatureMap& ego, const BEVFeatureMap& other) {
  if (!(ego.grid == other.grid)) {
    throw Error(ErrorKind::GridMismatch, "received map is not on the ego grid; warp it first");
  }
  if (ego.data.shape() != other.data.shape()) {
    throw Error(ErrorKind::ShapeMismatch, "ego " + ad::shape_str(ego.data.shape()) + " vs received " +
                                              ad::shape_str(other.data.shape()));
  }
}

void require_mask(const OverlapMask& m, const ad::Tensor& x) {
  if (m.valid.size() != x.dim(1) * x.dim(2)) {
    throw Error(ErrorKind::ShapeMismatch, "overlap mask does not match the feature grid");
  }
}

}  // namespace

std::string_view to_string(Reduction r) {
  switch (r) {
    case Reduction::Conv1x1: return "conv1x1";
    case Reduction::Mean: return "mean";
    case Reduction::Max: return "max";
  }
  return "?";
}

std::string_view to_string(FusionKind f) { return f == FusionKind::Complementary ? "complementary" : "maxout"; }

Reduction parse_reduction(std::string_view s) {
  if (s == "conv1x1") return Reduction::Conv1x1;
  if (s == "mean") return Reduction::Mean;
  if (s == "max") return Reduction::Max;
  throw Error(ErrorKind::Config, "unknown reduction '" + std::string(s) + "' (conv1x1|mean|max)");
}

FusionKind parse_fusion(std::string_view s) {
  if (s == "complementary") return FusionKind::Complementary;
  if (s == "maxout") return FusionKind::Maxout;
  throw Error(ErrorKind::Config, "unknown fusion '" + std::string(s) + "' (complementary|maxout)");
}

void DPNetConfig::validate() const {
  if (channels == 0) throw Error(ErrorKind::Config, "dpnet channels must be positive");
  if (layers < 1 || layers > 3) throw Error(ErrorKind::Config, "dpnet layers must be 1, 2 or 3");
  if (kernel != 1 && kernel != 3 && kernel != 5) throw Error(ErrorKind::Config, "dpnet kernel must be 1, 3 or 5");
}

DPNetParams DPNetParams::init(const DPNetConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  DPNetParams p;
  p.config = cfg;
  const std::size_t C = cfg.channels;
  if (cfg.reduction == Reduction::Conv1x1) p.reduce = nn::make_conv(1, 2 * C, 1, 1, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    p.wnet.push_back({nn::make_conv(1, 1, cfg.kernel, 1, rng), ad::BatchNormParams::identity(1)});
  }
  p.fuse = nn::make_conv(C, 2 * C, 1, 1, rng);
  // Start the projection at ego_part + sender_part so the shared head sees
  // ego-like features from the first step.
  auto w = p.fuse.weight.mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  for (std::size_t o = 0; o < C; ++o) {
    w[o * 2 * C + o] = 1.0;
    w[o * 2 * C + C + o] = 1.0;
  }
  return p;
}

DPNetParams DPNetParams::zeros(const DPNetConfig& cfg) {
  cfg.validate();
  DPNetParams p;
  p.config = cfg;
  const std::size_t C = cfg.channels;
  if (cfg.reduction == Reduction::Conv1x1) p.reduce = nn::zero_conv(1, 2 * C, 1);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    p.wnet.push_back({nn::zero_conv(1, 1, cfg.kernel), ad::BatchNormParams::identity(1)});
  }
  p.fuse = nn::zero_conv(C, 2 * C, 1);
  return p;
}

std::vector<nn::NamedTensor> DPNetParams::named_parameters() const {
  std::vector<nn::NamedTensor> out;
  nn::collect("dpnet.reduce", reduce, out);
  for (std::size_t l = 0; l < wnet.size(); ++l) {
    nn::collect("dpnet.wnet" + std::to_string(l) + ".conv", wnet[l].conv, out);
    nn::collect("dpnet.wnet" + std::to_string(l) + ".bn", wnet[l].bn, out);
  }
  nn::collect("dpnet.fuse", fuse, out);
  return out;
}

std::vector<nn::NamedBuffer> DPNetParams::named_buffers() {
  std::vector<nn::NamedBuffer> out;
  for (std::size_t l = 0; l < wnet.size(); ++l) {
    nn::collect_buffers("dpnet.wnet" + std::to_string(l) + ".bn", wnet[l].bn, out);
  }
  return out;
}

std::size_t DPNetParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : named_parameters()) n += t.tensor.numel();
  return n;
}

void DPNetParams::set_training(bool training) {
  for (auto& l : wnet) l.bn.training = training;
}

std::size_t parameter_count(const DPNetConfig& cfg) {
  const std::size_t C = cfg.channels;
  const std::size_t reduce = cfg.reduction == Reduction::Conv1x1 ? 2 * C + 1 : 0;
  const std::size_t per_layer = cfg.kernel * cfg.kernel + 1 + 2;
  const std::size_t fuse = 2 * C * C + C;
  return reduce + cfg.layers * per_layer + fuse;
}

ad::Tensor reduce_to_single_channel(const BEVFeatureMap& ego, const BEVFeatureMap& warped,
                                    const DPNetParams& p) {
  require_same_layout(ego, warped);
  const ad::Tensor stacked = ad::concat_channels(ego.data, warped.data);
  switch (p.config.reduction) {
    case Reduction::Conv1x1: return ad::conv2d(stacked, p.reduce);
    case Reduction::Mean: return ad::channel_mean(stacked);
    case Reduction::Max: return ad::channel_max(stacked);
  }
  return {};
}

WeightMap compute_weight_map(const ad::Tensor& phi, const OverlapMask& overlap, DPNetParams& p) {
  require_mask(overlap, phi);
  ad::Tensor x = phi;
  for (std::size_t l = 0; l < p.wnet.size(); ++l) {
    x = ad::batchnorm2d(ad::conv2d(x, p.wnet[l].conv), p.wnet[l].bn);
    x = (l + 1 == p.wnet.size()) ? ad::sigmoid(x) : ad::relu(x);
  }
  WeightMap m;
  m.raw = ad::add(phi, x);
  m.normalized = ad::masked_minmax_normalize(m.raw, overlap.valid);
  m.overlap = overlap;
  return m;
}

Blend complementary_blend(const BEVFeatureMap& ego, const BEVFeatureMap& warped, const WeightMap& m,
                          bool complementary) {
  require_same_layout(ego, warped);
  Blend b;
  b.ego_part = ad::mul(m.normalized, ego.data);
  b.sender_part = complementary ? ad::mul(ad::affine(m.normalized, -1.0, 1.0), warped.data) : warped.data;
  return b;
}

ad::Tensor fuse_complementary(const BEVFeatureMap& ego, const BEVFeatureMap& warped, const WeightMap& m,
                              const DPNetParams& p) {
  require_mask(m.overlap, ego.data);
  const Blend b = complementary_blend(ego, warped, m, p.config.complementary);
  const ad::Tensor fused = ad::conv2d(ad::concat_channels(b.ego_part, b.sender_part), p.fuse);
  return ad::where(m.overlap.valid, fused, ego.data);
}

ad::Tensor fuse_maxout(const BEVFeatureMap& ego, const BEVFeatureMap& warped, const OverlapMask& overlap) {
  require_same_layout(ego, warped);
  require_mask(overlap, ego.data);
  return ad::where(overlap.valid, ad::maximum(ego.data, warped.data), ego.data);
}

ad::Tensor forward_dual(const BEVFeatureMap& ego, const std::optional<ReceivedFeatures>& received,
                        DPNetParams& p) {
  if (!received) return ego.data;
  const BEVFeatureMap& warped = received->map;
  require_same_layout(ego, warped);
  if (p.config.fusion == FusionKind::Maxout) return fuse_maxout(ego, warped, received->overlap);
  const ad::Tensor phi = reduce_to_single_channel(ego, warped, p);
  const WeightMap m = compute_weight_map(phi, received->overlap, p);
  return fuse_complementary(ego, warped, m, p);
}

}  // namespace sicp::dpnet
