// SPDX-License-Identifier: Apache-2.0
#include "amn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace amn {

GradCheckReport finite_diff_check(const ScalarFn &f, const Tensor &x, double h, double tol,
                                  const std::function<void(std::span<double>)> &corrupt) {
  Tensor probe(x.shape(), std::vector<double>(x.values().begin(), x.values().end()), true);
  Tensor loss = f(probe);
  if (loss.numel() != 1)
    throw std::invalid_argument("finite_diff_check: function is not scalar-valued");
  backward(loss);
  std::vector<double> analytic(probe.grad().begin(), probe.grad().end());
  if (corrupt)
    corrupt(analytic);

  GradCheckReport report;
  NoGradGuard no_grad;
  auto values = probe.mutable_values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + h;
    const double up = f(probe).item();
    values[i] = saved - h;
    const double down = f(probe).item();
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-3});
    const double err = std::abs(analytic[i] - numeric) / denom;
    if (err > report.max_rel_error || i == 0) {
      report.max_rel_error = std::max(report.max_rel_error, err);
      if (err >= report.max_rel_error) {
        report.worst_index = i;
        report.analytic = analytic[i];
        report.numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_error <= tol && std::isfinite(report.max_rel_error);
  return report;
}

} // namespace amn
