#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sicp/tensor.hpp"

namespace sicp::ad {

/// Convolution weights for a same-padded 2D cross-correlation.
/// `weight` is [out, in, k, k] with k odd; `bias` is [out] or undefined.
struct ConvParams {
  Tensor weight;
  Tensor bias;
  std::size_t stride = 1;

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t kernel() const { return weight.dim(2); }
  std::size_t parameter_count() const;
};

struct BatchNormParams {
  Tensor gamma;
  Tensor beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double eps = 1e-5;
  double momentum = 0.1;
  bool training = true;

  static BatchNormParams identity(std::size_t channels);
  std::size_t channels() const { return gamma.numel(); }
};

enum class Activation { Relu, Sigmoid };
enum class Elementwise { Add, Mul, Max };

/// Output spatial size of a same-padded convolution: ceil(n / stride).
std::size_t conv_out_size(std::size_t n, std::size_t stride);

Tensor conv2d(const Tensor& x, const ConvParams& p);
/// Train mode normalises with per-channel batch statistics and updates the
/// running estimates in `p`; eval mode reads the running estimates only.
Tensor batchnorm2d(const Tensor& x, BatchNormParams& p);
Tensor activation(const Tensor& x, Activation kind);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor concat_channels(const Tensor& a, const Tensor& b);

/// Equal shapes, or one operand [1,H,W] broadcast against a [C,H,W] other.
/// Max routes the gradient to the larger operand; ties go to `a`.
Tensor elementwise(const Tensor& a, const Tensor& b, Elementwise kind);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

/// scale * x + shift
Tensor affine(const Tensor& x, double scale, double shift);
Tensor sum(const Tensor& x);
Tensor channel_mean(const Tensor& x);
Tensor channel_max(const Tensor& x);

/// Per-cell select over [C,H,W] operands using an H*W mask: mask ? a : b.
Tensor where(std::span<const std::uint8_t> mask, const Tensor& a, const Tensor& b);

/// Min-max normalisation of a [1,H,W] map over the cells where `mask` is set;
/// cells outside the mask are exactly 0. When max - min < eps every masked
/// cell becomes `degenerate_value` (with zero gradient).
Tensor masked_minmax_normalize(const Tensor& x, std::span<const std::uint8_t> mask,
                               double eps = 1e-8, double degenerate_value = 0.5);

}  // namespace sicp::ad
