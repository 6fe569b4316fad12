#include "tctrans/grad_check.hpp"

#include <cmath>

#include "tctrans/rng.hpp"

namespace tct {

template <typename T>
GradCheckResult grad_check(const std::function<Tensor<T>()>& build_loss,
                           const std::vector<Tensor<T>>& params,
                           const GradCheckOptions& opts) {
  if (params.empty()) throw ConfigError("grad_check: no parameters given");
  for (const auto& p : params) {
    if (!p.requires_grad()) {
      throw ConfigError("grad_check: all parameters must require gradients");
    }
  }

  auto eval = [&]() -> double {
    Tensor<T> loss = build_loss();
    double v = double(loss.item());
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
    return v;
  };

  std::vector<Tensor<T>> ps = params;
  for (auto& p : ps) p.zero_grad();
  Tensor<T> loss = build_loss();
  const double l0 = double(loss.item());
  if (!std::isfinite(l0)) throw NumericError("grad_check: non-finite loss");
  backward(loss);

  std::vector<std::vector<double>> analytic(ps.size());
  double max_abs_grad = 0.0;
  for (size_t i = 0; i < ps.size(); ++i) {
    analytic[i].assign(size_t(ps[i].numel()), 0.0);
    if (ps[i].has_grad()) {
      const auto& g = ps[i].grad();
      for (size_t j = 0; j < g.size(); ++j) {
        analytic[i][j] = double(g[j]);
        max_abs_grad = std::max(max_abs_grad, std::fabs(analytic[i][j]));
      }
    }
    ps[i].zero_grad();
  }

  // Eligible coordinates after the magnitude filter.
  const double floor_mag = opts.min_grad_filter * max_abs_grad;
  std::vector<std::pair<size_t, size_t>> coords;
  for (size_t i = 0; i < ps.size(); ++i) {
    for (size_t j = 0; j < analytic[i].size(); ++j) {
      if (std::fabs(analytic[i][j]) >= floor_mag) coords.emplace_back(i, j);
    }
  }
  if (coords.empty()) throw ConfigError("grad_check: no eligible coordinates");

  Rng rng(opts.seed, 0x67726164ull);
  rng.shuffle(coords.begin(), coords.end());
  const size_t n_check = std::min(coords.size(), size_t(opts.samples));

  GradCheckResult res;
  const double s = opts.step;
  for (size_t ci = 0; ci < n_check; ++ci) {
    auto [pi, off] = coords[ci];
    auto& vals = ps[pi].data();
    const T orig = vals[off];
    vals[off] = T(double(orig) + s);
    const double lp = eval();
    vals[off] = T(double(orig) - s);
    const double lm = eval();
    vals[off] = orig;

    // kink detector: second difference is O(step) across a hinge,
    // O(step^2) on a smooth path
    if (std::fabs(lp + lm - 2.0 * l0) > opts.curvature_skip * s * s * (1.0 + std::fabs(l0))) {
      ++res.skipped_kink;
      continue;
    }
    const double numeric = (lp - lm) / (2.0 * s);
    const double rel = std::fabs(analytic[pi][off] - numeric) /
                       std::max(std::fabs(numeric), 1e-8);
    res.max_rel_error = std::max(res.max_rel_error, rel);
    ++res.checked;
  }
  res.pass = res.checked > 0 && res.max_rel_error <= opts.tol;
  return res;
}

template GradCheckResult grad_check<float>(const std::function<Tensor<float>()>&,
                                           const std::vector<Tensor<float>>&,
                                           const GradCheckOptions&);
template GradCheckResult grad_check<double>(const std::function<Tensor<double>()>&,
                                            const std::vector<Tensor<double>>&,
                                            const GradCheckOptions&);

}  // namespace tct
