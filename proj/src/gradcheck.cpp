// SPDX-License-Identifier: Apache-2.0
#include <lasd/gradcheck.hpp>

#include <algorithm>
#include <cmath>

namespace lasd {

namespace {
double evaluate(const ScalarFunction &f, const TensorD &x) {
  const auto y = f(constant(x));
  if (y.value().size() != 1)
    throw Error("finite_diff_check: function is not scalar-valued");
  const double v = y.value()[0];
  if (!std::isfinite(v))
    throw NumericError("finite_diff_check: non-finite function value");
  return v;
}
} // namespace

GradCheckResult finite_diff_report(const ScalarFunction &f, const TensorD &x,
                                   double step) {
  GradCheckResult r;
  {
    Tape<double> tape;
    auto xv = tape.leaf(x);
    auto y = f(xv);
    if (!y.requires_grad()) {
      r.analytic = TensorD(x.shape());
    } else {
      tape.backward(y);
      r.analytic = xv.grad();
    }
  }
  for (double v : r.analytic.data())
    if (!std::isfinite(v))
      throw NumericError("finite_diff_check: non-finite analytic gradient");

  r.numeric = TensorD(x.shape());
  TensorD probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    const double up = evaluate(f, probe);
    probe[i] = x[i] - step;
    const double down = evaluate(f, probe);
    probe[i] = x[i];
    r.numeric[i] = (up - down) / (2 * step);

    const double a = r.analytic[i], c = r.numeric[i];
    const double denom = std::max({std::abs(a), std::abs(c), 1e-8});
    const double err = std::abs(a - c) / denom;
    if (err > r.max_relative_error) {
      r.max_relative_error = err;
      r.worst_index = i;
    }
  }
  return r;
}

double finite_diff_check(const ScalarFunction &f, const TensorD &x,
                         double step) {
  return finite_diff_report(f, x, step).max_relative_error;
}

} // namespace lasd
