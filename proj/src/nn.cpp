#include "sicp/nn.hpp"

#include <cmath>

namespace sicp::nn {

ad::ConvParams make_conv(std::size_t out, std::size_t in, std::size_t kernel, std::size_t stride,
                         std::mt19937_64& rng, bool with_bias) {
  const double std_dev = std::sqrt(2.0 / static_cast<double>(in * kernel * kernel));
  std::normal_distribution<double> dist(0.0, std_dev);
  std::vector<double> w(out * in * kernel * kernel);
  for (double& v : w) v = dist(rng);
  ad::ConvParams p;
  p.weight = ad::Tensor::from({out, in, kernel, kernel}, std::move(w), true);
  if (with_bias) p.bias = ad::Tensor::zeros({out}, true);
  p.stride = stride;
  return p;
}

ad::ConvParams zero_conv(std::size_t out, std::size_t in, std::size_t kernel, std::size_t stride) {
  ad::ConvParams p;
  p.weight = ad::Tensor::zeros({out, in, kernel, kernel}, true);
  p.bias = ad::Tensor::zeros({out}, true);
  p.stride = stride;
  return p;
}

ad::Tensor ConvBlock::forward(const ad::Tensor& x) { return ad::relu(ad::batchnorm2d(ad::conv2d(x, conv), bn)); }

void collect(const std::string& prefix, const ad::ConvParams& conv, std::vector<NamedTensor>& out) {
  if (conv.weight.defined()) out.push_back({prefix + ".weight", conv.weight});
  if (conv.bias.defined()) out.push_back({prefix + ".bias", conv.bias});
}

void collect(const std::string& prefix, const ad::BatchNormParams& bn, std::vector<NamedTensor>& out) {
  out.push_back({prefix + ".gamma", bn.gamma});
  out.push_back({prefix + ".beta", bn.beta});
}

void collect_buffers(const std::string& prefix, ad::BatchNormParams& bn, std::vector<NamedBuffer>& out) {
  out.push_back({prefix + ".running_mean", &bn.running_mean});
  out.push_back({prefix + ".running_var", &bn.running_var});
}

}  // namespace sicp::nn
