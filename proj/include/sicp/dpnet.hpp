#pragma once

#include <optional>
#include <random>
#include <string_view>
#include <vector>

#include "sicp/geometry.hpp"
#include "sicp/nn.hpp"
#include "sicp/ops.hpp"

namespace sicp::dpnet {

using geom::BEVFeatureMap;
using geom::OverlapMask;

/// How the stacked (ego, received) maps are condensed to one channel.
enum class Reduction { Conv1x1, Mean, Max };
/// Cooperative fusion operator: learned complementary weights, or the maxout baseline.
enum class FusionKind { Complementary, Maxout };

std::string_view to_string(Reduction r);
std::string_view to_string(FusionKind f);
Reduction parse_reduction(std::string_view s);
FusionKind parse_fusion(std::string_view s);

struct DPNetConfig {
  std::size_t channels = 64;
  Reduction reduction = Reduction::Conv1x1;
  /// Conv+BN stages in the weight network, 1..3.
  std::size_t layers = 2;
  /// Weight-network kernel size: 1, 3 or 5.
  std::size_t kernel = 3;
  /// Off replaces the (1 - M) weight on received features with 1.
  bool complementary = true;
  FusionKind fusion = FusionKind::Complementary;

  void validate() const;
};

struct WeightNetLayer {
  ad::ConvParams conv;  // 1 -> 1 channel, kernel x kernel
  ad::BatchNormParams bn;
};

struct DPNetParams {
  DPNetConfig config;
  ad::ConvParams reduce;  // 2C -> 1, 1x1; unset unless reduction is Conv1x1
  std::vector<WeightNetLayer> wnet;
  ad::ConvParams fuse;  // 2C -> C, 1x1

  static DPNetParams init(const DPNetConfig& cfg, std::mt19937_64& rng);
  /// All weights and biases zero, batch norm at identity statistics.
  static DPNetParams zeros(const DPNetConfig& cfg);

  std::vector<nn::NamedTensor> named_parameters() const;
  std::vector<nn::NamedBuffer> named_buffers();
  std::size_t parameter_count() const;
  void set_training(bool training);
};

/// Closed-form trainable parameter count for a configuration.
std::size_t parameter_count(const DPNetConfig& cfg);

struct WeightMap {
  ad::Tensor raw;         // [1,H,W] before normalisation
  ad::Tensor normalized;  // [1,H,W] in [0,1], exactly 0 off-overlap
  OverlapMask overlap;
};

/// A received map already warped into the ego frame, with its coverage.
struct ReceivedFeatures {
  BEVFeatureMap map;
  OverlapMask overlap;
};

ad::Tensor reduce_to_single_channel(const BEVFeatureMap& ego, const BEVFeatureMap& warped,
                                    const DPNetParams& p);

/// raw = phi + sigmoid(BN(conv(... relu(BN(conv(phi)))))), then min-max
/// normalised over overlap cells and zeroed elsewhere. A flat map (range
/// below 1e-8) normalises to 0.5 on the overlap.
WeightMap compute_weight_map(const ad::Tensor& phi, const OverlapMask& overlap, DPNetParams& p);

struct Blend {
  ad::Tensor ego_part;     // M * F_ego
  ad::Tensor sender_part;  // (1 - M) * F'_j, or F'_j when complementary weights are off
};

Blend complementary_blend(const BEVFeatureMap& ego, const BEVFeatureMap& warped, const WeightMap& m,
                          bool complementary);

/// Conv1x1(concat(blend)) on overlap cells, ego features untouched elsewhere.
ad::Tensor fuse_complementary(const BEVFeatureMap& ego, const BEVFeatureMap& warped, const WeightMap& m,
                              const DPNetParams& p);

/// Elementwise max on overlap cells, ego features untouched elsewhere.
ad::Tensor fuse_maxout(const BEVFeatureMap& ego, const BEVFeatureMap& warped, const OverlapMask& overlap);

/// Mode dispatch: without a neighbour the ego map is returned as is; with one,
/// the configured fusion runs. At most one neighbour by construction.
ad::Tensor forward_dual(const BEVFeatureMap& ego, const std::optional<ReceivedFeatures>& received,
                        DPNetParams& p);

}  // namespace sicp::dpnet
