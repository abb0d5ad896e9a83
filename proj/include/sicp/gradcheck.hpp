#pragma once

#include <functional>
#include <span>
#include <string>

#include "sicp/tensor.hpp"

namespace sicp::ad {

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::size_t entries = 0;
  /// Entries skipped because [x-h, x+h] straddles a kink (see gradcheck).
  std::size_t nonsmooth = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares reverse-mode gradients of a scalar objective against central
/// differences, entry by entry over every tensor in `params`.
///
/// The relative error of one entry is |a - n| / max(|a|, |n|, floor) where
/// floor = max(1e-8, 1e-3 * largest |a|): entries far below the gradient's
/// own scale are judged against that scale, which keeps float64 roundoff in
/// the numeric estimate from dominating near-zero entries.
///
/// An entry whose one-sided slopes disagree by more than 1e-3 of their scale,
/// with the analytic value lying between them, sits on a kink; it is counted
/// in `nonsmooth` and left out of the error.
///
/// `objective` is rebuilt for every perturbation, so it must be a pure
/// function of the params' current values. Requires h in [1e-6, 1e-4].
GradcheckReport gradcheck(const std::function<Tensor()>& objective, std::span<Tensor> params,
                          double h = 1e-5);

}  // namespace sicp::ad
