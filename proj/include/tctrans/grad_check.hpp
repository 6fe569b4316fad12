#pragma once

#include <functional>

#include "tctrans/tensor.hpp"

namespace tct {

struct GradCheckOptions {
  int samples = 50;       // coordinates sampled across all parameters
  double step = 1e-5;     // central-difference step
  double tol = 1e-6;      // pass threshold on the max relative error
  uint64_t seed = 0;
  // Coordinates whose second difference |L+ + L- - 2*L0| exceeds
  // curvature_skip * step^2 * (1+|L0|) sit next to a hinge kink where the
  // central difference is meaningless; they are skipped, not failed.
  double curvature_skip = 30.0;
  // Exclude coordinates with |analytic| below this fraction of the largest
  // analytic gradient. At single precision the quotient noise floor swamps
  // near-zero gradients, so float suites set this to ~1e-2.
  double min_grad_filter = 0.0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  int checked = 0;
  int skipped_kink = 0;
  bool pass = false;
};

// Central finite-difference verification of reverse-mode gradients.
// build_loss must rebuild the scalar loss graph from the current parameter
// values; params are the leaf tensors perturbed coordinate by coordinate.
// Relative error per coordinate: |analytic - numeric| / max(|numeric|, 1e-8).
template <typename T>
GradCheckResult grad_check(const std::function<Tensor<T>()>& build_loss,
                           const std::vector<Tensor<T>>& params,
                           const GradCheckOptions& opts = {});

extern template GradCheckResult grad_check<float>(
    const std::function<Tensor<float>()>&, const std::vector<Tensor<float>>&,
    const GradCheckOptions&);
extern template GradCheckResult grad_check<double>(
    const std::function<Tensor<double>()>&, const std::vector<Tensor<double>>&,
    const GradCheckOptions&);

}  // namespace tct
