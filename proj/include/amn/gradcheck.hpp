// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

#include "amn/tensor.hpp"

namespace amn {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool passed = false;
};

using ScalarFn = std::function<Tensor(const Tensor &)>;

/// Compares the analytic gradient of scalar `f` at `x` with central
/// differences of step `h`. Element error is |a - n| / max(|a|, |n|, 1e-3),
/// so gradients far below the roundoff floor are judged absolutely.
/// `corrupt`, when set, perturbs the analytic gradient before comparison
/// (negative controls).
GradCheckReport finite_diff_check(const ScalarFn &f, const Tensor &x, double h = 1e-5,
                                  double tol = 1e-4,
                                  const std::function<void(std::span<double>)> &corrupt = {});

} // namespace amn
