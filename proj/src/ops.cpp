#include "sicp/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "sicp/error.hpp"

namespace sicp::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_rank3(const Tensor& x, const char* what) {
  if (x.rank() != 3) {
    throw Error(ErrorKind::ShapeMismatch,
                std::string(what) + " expects [C,H,W], got " + shape_str(x.shape()));
  }
}

struct ConvGeometry {
  std::size_t cin, h, w, k, stride, pad, hout, wout;
  std::size_t cols_rows() const { return cin * k * k; }
  std::size_t cols_cols() const { return hout * wout; }
  bool direct() const { return k == 1 && stride == 1; }
};

void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const std::size_t n = g.cols_cols();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        double* row = cols + ((c * g.k + ki) * g.k + kj) * n;
        for (std::size_t oi = 0; oi < g.hout; ++oi) {
          const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(oi * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          double* out = row + oi * g.wout;
          if (si < 0 || si >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(out, out + g.wout, 0.0);
            continue;
          }
          const double* src = x + (c * g.h + static_cast<std::size_t>(si)) * g.w;
          for (std::size_t oj = 0; oj < g.wout; ++oj) {
            const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(oj * g.stride + kj) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            out[oj] = (sj < 0 || sj >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : src[sj];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* dx) {
  const std::size_t n = g.cols_cols();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const double* row = cols + ((c * g.k + ki) * g.k + kj) * n;
        for (std::size_t oi = 0; oi < g.hout; ++oi) {
          const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(oi * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (si < 0 || si >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* dst = dx + (c * g.h + static_cast<std::size_t>(si)) * g.w;
          const double* in = row + oi * g.wout;
          for (std::size_t oj = 0; oj < g.wout; ++oj) {
            const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(oj * g.stride + kj) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (sj >= 0 && sj < static_cast<std::ptrdiff_t>(g.w)) dst[sj] += in[oj];
          }
        }
      }
    }
  }
}

// Index of the operand element feeding output element `idx` under the
// [1,H,W] -> [C,H,W] broadcast rule.
struct Broadcast {
  Shape out;
  bool a_bcast = false;
  bool b_bcast = false;
  std::size_t plane = 0;
};

Broadcast broadcast_shapes(const Tensor& a, const Tensor& b) {
  Broadcast r;
  if (a.shape() == b.shape()) {
    r.out = a.shape();
    return r;
  }
  auto compatible = [](const Shape& full, const Shape& single) {
    return full.size() == 3 && single.size() == 3 && single[0] == 1 && full[1] == single[1] &&
           full[2] == single[2];
  };
  if (compatible(a.shape(), b.shape())) {
    r.out = a.shape();
    r.b_bcast = true;
  } else if (compatible(b.shape(), a.shape())) {
    r.out = b.shape();
    r.a_bcast = true;
  } else {
    throw Error(ErrorKind::ShapeMismatch,
                "cannot broadcast " + shape_str(a.shape()) + " with " + shape_str(b.shape()));
  }
  r.plane = r.out[1] * r.out[2];
  return r;
}

}  // namespace

std::size_t ConvParams::parameter_count() const {
  return weight.numel() + (bias.defined() ? bias.numel() : 0);
}

BatchNormParams BatchNormParams::identity(std::size_t channels) {
  BatchNormParams p;
  p.gamma = Tensor::full({channels}, 1.0, true);
  p.beta = Tensor::zeros({channels}, true);
  p.running_mean.assign(channels, 0.0);
  p.running_var.assign(channels, 1.0);
  return p;
}

std::size_t conv_out_size(std::size_t n, std::size_t stride) { return (n + stride - 1) / stride; }

Tensor conv2d(const Tensor& x, const ConvParams& p) {
  require_rank3(x, "conv2d");
  if (p.weight.rank() != 4 || p.weight.dim(2) != p.weight.dim(3) || p.weight.dim(2) % 2 == 0) {
    throw Error(ErrorKind::ShapeMismatch,
                "conv2d kernel must be [out,in,k,k] with odd k, got " + shape_str(p.weight.shape()));
  }
  if (p.weight.dim(1) != x.dim(0)) {
    throw Error(ErrorKind::ShapeMismatch, "conv2d input has " + std::to_string(x.dim(0)) +
                                              " channels, kernel expects " +
                                              std::to_string(p.weight.dim(1)));
  }
  if (p.bias.defined() && p.bias.numel() != p.weight.dim(0)) {
    throw Error(ErrorKind::ShapeMismatch, "conv2d bias length does not match out channels");
  }
  if (p.stride == 0) throw Error(ErrorKind::ShapeMismatch, "conv2d stride must be positive");

  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), p.kernel(), p.stride, (p.kernel() - 1) / 2, 0, 0};
  g.hout = conv_out_size(g.h, g.stride);
  g.wout = conv_out_size(g.w, g.stride);
  const std::size_t cout = p.out_channels();
  const std::size_t K = g.cols_rows();
  const std::size_t N = g.cols_cols();

  std::vector<double> out(cout * N);
  std::vector<double> cols;
  const double* colptr = x.data().data();
  if (!g.direct()) {
    cols.resize(K * N);
    im2col(x.data().data(), g, cols.data());
    colptr = cols.data();
  }
  MapMat y(out.data(), cout, N);
  y.noalias() = ConstMapMat(p.weight.data().data(), cout, K) * ConstMapMat(colptr, K, N);
  if (p.bias.defined()) {
    for (std::size_t o = 0; o < cout; ++o) y.row(o).array() += p.bias.data()[o];
  }

  return make_result(
      {cout, g.hout, g.wout}, std::move(out), {x, p.weight, p.bias}, [g, cout](Node& self) {
        const std::size_t K = g.cols_rows();
        const std::size_t N = g.cols_cols();
        const Node& xin = *self.inputs[0];
        const Node& win = *self.inputs[1];
        ConstMapMat dy(self.grad.data(), cout, N);

        if (double* dw = input_grad(self, 1)) {
          std::vector<double> cols;
          const double* colptr = xin.value.data();
          if (!g.direct()) {
            cols.resize(K * N);
            im2col(xin.value.data(), g, cols.data());
            colptr = cols.data();
          }
          MapMat(dw, cout, K).noalias() += dy * ConstMapMat(colptr, K, N).transpose();
        }
        if (double* db = input_grad(self, 2)) {
          // Plain loop: Eigen's vectorised sum peels by address, so its order varies with the allocation.
          for (std::size_t o = 0; o < cout; ++o) {
            const double* row = self.grad.data() + o * N;
            double acc = 0.0;
            for (std::size_t n = 0; n < N; ++n) acc += row[n];
            db[o] += acc;
          }
        }
        if (double* dx = input_grad(self, 0)) {
          if (g.direct()) {
            MapMat(dx, K, N).noalias() += ConstMapMat(win.value.data(), cout, K).transpose() * dy;
          } else {
            std::vector<double> dcols(K * N);
            MapMat(dcols.data(), K, N).noalias() =
                ConstMapMat(win.value.data(), cout, K).transpose() * dy;
            col2im_add(dcols.data(), g, dx);
          }
        }
      });
}

Tensor batchnorm2d(const Tensor& x, BatchNormParams& p) {
  require_rank3(x, "batchnorm2d");
  const std::size_t C = x.dim(0);
  const std::size_t n = x.dim(1) * x.dim(2);
  if (p.channels() != C || p.beta.numel() != C || p.running_mean.size() != C ||
      p.running_var.size() != C) {
    throw Error(ErrorKind::ShapeMismatch, "batchnorm2d parameters do not match " +
                                              std::to_string(C) + " channels");
  }
  if (p.training && n < 2) {
    throw Error(ErrorKind::ShapeMismatch, "batchnorm2d train mode needs more than one value per channel");
  }

  const auto xv = x.data();
  const auto gamma = p.gamma.data();
  const auto beta = p.beta.data();
  std::vector<double> mean(C), inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (p.training) {
      const double* xc = xv.data() + c * n;
      double m = 0.0;
      for (std::size_t k = 0; k < n; ++k) m += xc[k];
      m /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t k = 0; k < n; ++k) var += (xc[k] - m) * (xc[k] - m);
      var /= static_cast<double>(n);
      mean[c] = m;
      inv_std[c] = 1.0 / std::sqrt(var + p.eps);
      const double unbiased = var * static_cast<double>(n) / static_cast<double>(n - 1);
      p.running_mean[c] = (1.0 - p.momentum) * p.running_mean[c] + p.momentum * m;
      p.running_var[c] = (1.0 - p.momentum) * p.running_var[c] + p.momentum * unbiased;
    } else {
      mean[c] = p.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(std::max(p.running_var[c], 0.0) + p.eps);
    }
  }

  std::vector<double> xhat(xv.size()), out(xv.size());
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t idx = c * n + k;
      xhat[idx] = (xv[idx] - mean[c]) * inv_std[c];
      out[idx] = gamma[c] * xhat[idx] + beta[c];
    }
  }

  const bool training = p.training;
  return make_result(
      x.shape(), std::move(out), {x, p.gamma, p.beta},
      [C, n, training, inv_std = std::move(inv_std), xhat = std::move(xhat)](Node& self) {
        const double* dy = self.grad.data();
        const double* gamma = self.inputs[1]->value.data();
        double* dx = input_grad(self, 0);
        double* dgamma = input_grad(self, 1);
        double* dbeta = input_grad(self, 2);
        for (std::size_t c = 0; c < C; ++c) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t k = 0; k < n; ++k) {
            sum_dy += dy[c * n + k];
            sum_dy_xhat += dy[c * n + k] * xhat[c * n + k];
          }
          if (dgamma) dgamma[c] += sum_dy_xhat;
          if (dbeta) dbeta[c] += sum_dy;
          if (!dx) continue;
          const double scale = gamma[c] * inv_std[c];
          if (training) {
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t k = 0; k < n; ++k) {
              const std::size_t idx = c * n + k;
              dx[idx] += scale * (dy[idx] - inv_n * sum_dy - xhat[idx] * inv_n * sum_dy_xhat);
            }
          } else {
            for (std::size_t k = 0; k < n; ++k) dx[c * n + k] += scale * dy[c * n + k];
          }
        }
      });
}

Tensor activation(const Tensor& x, Activation kind) {
  return kind == Activation::Relu ? relu(x) : sigmoid(x);
}

Tensor relu(const Tensor& x) {
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  // NaN passes through so a poisoned input still surfaces as a non-finite loss.
  for (std::size_t k = 0; k < xv.size(); ++k) out[k] = xv[k] > 0.0 || std::isnan(xv[k]) ? xv[k] : 0.0;
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    const auto& xv = self.inputs[0]->value;
    double* dx = input_grad(self, 0);
    // subgradient at exactly 0 is 0
    for (std::size_t k = 0; k < xv.size(); ++k) {
      if (xv[k] > 0.0) dx[k] += self.grad[k];
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t k = 0; k < xv.size(); ++k) {
    const double v = xv[k];
    if (v >= 0.0) {
      out[k] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      out[k] = e / (1.0 + e);
    }
  }
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    double* dx = input_grad(self, 0);
    for (std::size_t k = 0; k < self.value.size(); ++k) {
      const double s = self.value[k];
      dx[k] += self.grad[k] * s * (1.0 - s);
    }
  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank3(a, "concat_channels");
  require_rank3(b, "concat_channels");
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    throw Error(ErrorKind::ShapeMismatch, "concat_channels spatial mismatch " +
                                              shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<double> out;
  out.reserve(a.numel() + b.numel());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  const std::size_t na = a.numel();
  return make_result({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, std::move(out), {a, b},
                     [na](Node& self) {
                       if (double* da = input_grad(self, 0)) {
                         for (std::size_t k = 0; k < na; ++k) da[k] += self.grad[k];
                       }
                       if (double* db = input_grad(self, 1)) {
                         for (std::size_t k = na; k < self.grad.size(); ++k) db[k - na] += self.grad[k];
                       }
                     });
}

Tensor elementwise(const Tensor& a, const Tensor& b, Elementwise kind) {
  const Broadcast bc = broadcast_shapes(a, b);
  const std::size_t total = numel(bc.out);
  const auto av = a.data();
  const auto bv = b.data();
  auto ia = [&bc](std::size_t k) { return bc.a_bcast ? k % bc.plane : k; };
  auto ib = [&bc](std::size_t k) { return bc.b_bcast ? k % bc.plane : k; };

  std::vector<double> out(total);
  for (std::size_t k = 0; k < total; ++k) {
    const double x = av[ia(k)], y = bv[ib(k)];
    switch (kind) {
      case Elementwise::Add: out[k] = x + y; break;
      case Elementwise::Mul: out[k] = x * y; break;
      case Elementwise::Max: out[k] = x >= y ? x : y; break;
    }
  }
  return make_result(bc.out, std::move(out), {a, b}, [bc, kind](Node& self) {
    auto ia = [&bc](std::size_t k) { return bc.a_bcast ? k % bc.plane : k; };
    auto ib = [&bc](std::size_t k) { return bc.b_bcast ? k % bc.plane : k; };
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    double* da = input_grad(self, 0);
    double* db = input_grad(self, 1);
    for (std::size_t k = 0; k < self.grad.size(); ++k) {
      const double g = self.grad[k];
      const std::size_t ka = ia(k), kb = ib(k);
      switch (kind) {
        case Elementwise::Add:
          if (da) da[ka] += g;
          if (db) db[kb] += g;
          break;
        case Elementwise::Mul:
          if (da) da[ka] += g * bv[kb];
          if (db) db[kb] += g * av[ka];
          break;
        case Elementwise::Max:
          if (av[ka] >= bv[kb]) {
            if (da) da[ka] += g;
          } else if (db) {
            db[kb] += g;
          }
          break;
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, Elementwise::Add); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, Elementwise::Mul); }
Tensor maximum(const Tensor& a, const Tensor& b) { return elementwise(a, b, Elementwise::Max); }

Tensor affine(const Tensor& x, double scale, double shift) {
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t k = 0; k < xv.size(); ++k) out[k] = scale * xv[k] + shift;
  return make_result(x.shape(), std::move(out), {x}, [scale](Node& self) {
    double* dx = input_grad(self, 0);
    for (std::size_t k = 0; k < self.grad.size(); ++k) dx[k] += scale * self.grad[k];
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({1}, {s}, {x}, [](Node& self) {
    double* dx = input_grad(self, 0);
    const double g = self.grad[0];
    for (std::size_t k = 0; k < self.inputs[0]->value.size(); ++k) dx[k] += g;
  });
}

Tensor channel_mean(const Tensor& x) {
  require_rank3(x, "channel_mean");
  const std::size_t C = x.dim(0), plane = x.dim(1) * x.dim(2);
  const auto xv = x.data();
  std::vector<double> out(plane, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t k = 0; k < plane; ++k) out[k] += xv[c * plane + k];
  }
  for (double& v : out) v /= static_cast<double>(C);
  return make_result({1, x.dim(1), x.dim(2)}, std::move(out), {x}, [C, plane](Node& self) {
    double* dx = input_grad(self, 0);
    const double inv = 1.0 / static_cast<double>(C);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t k = 0; k < plane; ++k) dx[c * plane + k] += inv * self.grad[k];
    }
  });
}

Tensor channel_max(const Tensor& x) {
  require_rank3(x, "channel_max");
  const std::size_t C = x.dim(0), plane = x.dim(1) * x.dim(2);
  const auto xv = x.data();
  std::vector<double> out(plane);
  std::vector<std::size_t> argmax(plane, 0);
  for (std::size_t k = 0; k < plane; ++k) {
    double best = xv[k];
    for (std::size_t c = 1; c < C; ++c) {
      if (xv[c * plane + k] > best) {
        best = xv[c * plane + k];
        argmax[k] = c;
      }
    }
    out[k] = best;
  }
  return make_result({1, x.dim(1), x.dim(2)}, std::move(out), {x},
                     [plane, argmax = std::move(argmax)](Node& self) {
                       double* dx = input_grad(self, 0);
                       for (std::size_t k = 0; k < plane; ++k) dx[argmax[k] * plane + k] += self.grad[k];
                     });
}

Tensor where(std::span<const std::uint8_t> mask, const Tensor& a, const Tensor& b) {
  require_rank3(a, "where");
  if (a.shape() != b.shape()) {
    throw Error(ErrorKind::ShapeMismatch,
                "where operands differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t plane = a.dim(1) * a.dim(2);
  if (mask.size() != plane) throw Error(ErrorKind::ShapeMismatch, "where mask is not H*W");
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t k = 0; k < av.size(); ++k) out[k] = m[k % plane] ? av[k] : bv[k];
  return make_result(a.shape(), std::move(out), {a, b}, [plane, m = std::move(m)](Node& self) {
    double* da = input_grad(self, 0);
    double* db = input_grad(self, 1);
    for (std::size_t k = 0; k < self.grad.size(); ++k) {
      if (m[k % plane]) {
        if (da) da[k] += self.grad[k];
      } else if (db) {
        db[k] += self.grad[k];
      }
    }
  });
}

Tensor masked_minmax_normalize(const Tensor& x, std::span<const std::uint8_t> mask, double eps,
                               double degenerate_value) {
  require_rank3(x, "masked_minmax_normalize");
  if (x.dim(0) != 1 || mask.size() != x.numel()) {
    throw Error(ErrorKind::ShapeMismatch, "masked_minmax_normalize expects [1,H,W] and an H*W mask");
  }
  const auto xv = x.data();
  std::size_t amin = xv.size(), amax = xv.size();
  for (std::size_t k = 0; k < xv.size(); ++k) {
    if (!mask[k]) continue;
    if (amin == xv.size() || xv[k] < xv[amin]) amin = k;
    if (amax == xv.size() || xv[k] > xv[amax]) amax = k;
  }
  std::vector<double> out(xv.size(), 0.0);
  if (amin == xv.size()) {
    return make_result(x.shape(), std::move(out), {x}, [](Node&) {});
  }
  const double lo = xv[amin], range = xv[amax] - xv[amin];
  if (range < eps) {
    for (std::size_t k = 0; k < xv.size(); ++k) {
      if (mask[k]) out[k] = degenerate_value;
    }
    return make_result(x.shape(), std::move(out), {x}, [](Node&) {});
  }
  for (std::size_t k = 0; k < xv.size(); ++k) {
    if (mask[k]) out[k] = (xv[k] - lo) / range;
  }
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return make_result(x.shape(), std::move(out), {x},
                     [amin, amax, range, m = std::move(m)](Node& self) {
                       double* dx = input_grad(self, 0);
                       const auto& xv = self.inputs[0]->value;
                       const double lo = xv[amin], hi = xv[amax];
                       const double inv = 1.0 / range, inv2 = inv * inv;
                       double g_lo = 0.0, g_hi = 0.0;
                       for (std::size_t k = 0; k < xv.size(); ++k) {
                         if (!m[k]) continue;
                         const double g = self.grad[k];
                         dx[k] += g * inv;
                         g_lo += g * (xv[k] - hi) * inv2;
                         g_hi -= g * (xv[k] - lo) * inv2;
                       }
                       dx[amin] += g_lo;
                       dx[amax] += g_hi;
                     });
}

}  // namespace sicp::ad
