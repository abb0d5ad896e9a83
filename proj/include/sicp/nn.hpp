#pragma once

#include <random>
#include <string>
#include <vector>

#include "sicp/ops.hpp"

namespace sicp::nn {

struct NamedTensor {
  std::string name;
  ad::Tensor tensor;
};

/// Non-trainable state (batch-norm running statistics).
struct NamedBuffer {
  std::string name;
  std::vector<double>* values;
};

/// Kaiming-normal weights, zero bias.
ad::ConvParams make_conv(std::size_t out, std::size_t in, std::size_t kernel, std::size_t stride,
                         std::mt19937_64& rng, bool with_bias = true);
ad::ConvParams zero_conv(std::size_t out, std::size_t in, std::size_t kernel, std::size_t stride = 1);

struct ConvBlock {
  ad::ConvParams conv;
  ad::BatchNormParams bn;

  /// conv -> batch norm -> relu
  ad::Tensor forward(const ad::Tensor& x);
};

void collect(const std::string& prefix, const ad::ConvParams& conv, std::vector<NamedTensor>& out);
void collect(const std::string& prefix, const ad::BatchNormParams& bn, std::vector<NamedTensor>& out);
void collect_buffers(const std::string& prefix, ad::BatchNormParams& bn, std::vector<NamedBuffer>& out);

}  // namespace sicp::nn
