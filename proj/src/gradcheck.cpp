#include "sicp/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "sicp/error.hpp"

namespace sicp::ad {

GradcheckReport gradcheck(const std::function<Tensor()>& objective, std::span<Tensor> params,
                          double h) {
  if (!(h >= 1e-6 && h <= 1e-4)) {
    throw Error(ErrorKind::Config, "gradcheck step must lie in [1e-6, 1e-4]");
  }
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tensor f = objective();
  if (f.numel() != 1) {
    throw Error(ErrorKind::NonScalarObjective, "objective has shape " + shape_str(f.shape()));
  }
  f.backward();
  const double f0 = f.item();

  std::vector<std::vector<double>> analytic;
  double gmax = 0.0;
  for (auto& p : params) {
    std::vector<double> g(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), g.begin());
    for (double v : g) gmax = std::max(gmax, std::abs(v));
    analytic.push_back(std::move(g));
  }
  const double floor = std::max(1e-8, 1e-3 * gmax);

  GradcheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].mutable_data();
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double saved = values[k];
      values[k] = saved + h;
      const double up = objective().item();
      values[k] = saved - h;
      const double down = objective().item();
      values[k] = saved;

      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[pi][k];
      const double err =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++report.entries;
      // A kink (relu at 0, a min/max switching argument) inside [x-h, x+h]
      // shows up as one-sided slopes that disagree. If the analytic value is a
      // subgradient between them, the central difference is not a valid oracle.
      const double right = (up - f0) / h, left = (f0 - down) / h;
      const double spread = std::abs(right - left);
      const double scale = std::max({std::abs(right), std::abs(left), floor});
      // One-sided quotients carry O(h) curvature error on top of the jump.
      const double slack = 1e-6 * scale + 1e-2 * spread;
      if (err > 0.0 && spread > 1e-3 * scale && a >= std::min(left, right) - slack &&
          a <= std::max(left, right) + slack) {
        ++report.nonsmooth;
        continue;
      }
      if (err > report.max_rel_error || !std::isfinite(err)) {
        report.max_rel_error = std::isfinite(err) ? err : INFINITY;
        report.worst_param = pi;
        report.worst_index = k;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  for (auto& p : params) p.zero_grad();
  return report;
}

}  // namespace sicp::ad
