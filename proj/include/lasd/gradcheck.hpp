// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <lasd/autodiff.hpp>

#include <functional>

namespace lasd {

/// Scalar-valued function of one tensor argument, expressed in Var ops.
using ScalarFunction = std::function<Var<double>(const Var<double> &)>;

struct GradCheckResult {
  double max_relative_error = 0;
  std::size_t worst_index = 0;
  TensorD analytic;
  TensorD numeric;
};

/// Compares the tape gradient of `f` at `x` with central differences.
/// Per coordinate the error is |a - c| / max(|a|, |c|, 1e-8).
GradCheckResult finite_diff_report(const ScalarFunction &f, const TensorD &x,
                                   double step = 1e-5);

double finite_diff_check(const ScalarFunction &f, const TensorD &x,
                         double step = 1e-5);

} // namespace lasd
