// Central-difference verification of reverse-mode gradients. Runs in 64-bit;
// this is the independent oracle for every differentiable path in the project.
#pragma once

#include "quartf/numcore/ops.hpp"

namespace quartf {

struct GradCheckReport {
  double max_rel_err = 0.0;
  size_t worst_param = 0;
  Index worst_row = 0;
  Index worst_col = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// f must be a deterministic map from the current values of `params` to a
// scalar tensor. Relative error per coordinate is
//   |analytic - numeric| / max(1, |numeric|)
// and the maximum over all coordinates is returned.
template <typename F>
GradCheckReport grad_check(F&& f, std::vector<Tensor<double>>& params, double eps) {
  if (eps < 1e-7 || eps > 1e-3) throw ContractError("grad_check: eps must lie in [1e-7, 1e-3]");

  for (auto& p : params) {
    if (!p.requires_grad()) throw ContractError("grad_check: all params must require grad");
    p.zero_grad();
  }
  Tensor<double> loss = f(params);
  if (!loss.is_scalar()) throw ContractError("grad_check: f must return a scalar");
  backward(loss);

  std::vector<Matrix<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.has_grad() ? p.grad() : Matrix<double>::Zero(p.rows(), p.cols()));

  GradCheckReport report;
  for (size_t k = 0; k < params.size(); ++k) {
    auto& value = params[k].mutable_value();
    for (Index i = 0; i < value.rows(); ++i) {
      for (Index j = 0; j < value.cols(); ++j) {
        const double saved = value(i, j);
        value(i, j) = saved + eps;
        const double up = f(params).item();
        value(i, j) = saved - eps;
        const double down = f(params).item();
        value(i, j) = saved;
        if (!std::isfinite(up) || !std::isfinite(down))
          throw ContractError("grad_check: non-finite objective during finite differencing");
        const double numeric = (up - down) / (2.0 * eps);
        const double a = analytic[k](i, j);
        const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
        if (rel > report.max_rel_err) {
          report.max_rel_err = rel;
          report.worst_param = k;
          report.worst_row = i;
          report.worst_col = j;
          report.analytic = a;
          report.numeric = numeric;
        }
      }
    }
  }
  return report;
}

}  // namespace quartf
