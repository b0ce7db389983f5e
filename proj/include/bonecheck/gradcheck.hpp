#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>

#include "bonecheck/error.hpp"
#include "bonecheck/tape.hpp"
#include "bonecheck/tensor.hpp"

namespace bonecheck {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Scalar function of one tensor, expressed as tape operations.
using ScalarFunction = std::function<Var<double>(const Var<double>&)>;

/// Compares the reverse-mode gradient of `f` at `point` against central
/// differences. Relative error per coordinate is |a - b| / max(|a|, |b|, 1e-8).
/// 64-bit only: finite differences are unreliable in 32-bit.
inline GradCheckResult finite_difference_check(const ScalarFunction& f, const Tensor<double>& point, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw InvalidArgument("finite_difference_check: eps " + std::to_string(eps) + " outside [1e-7, 1e-3]");
  }

  Tensor<double> analytic;
  {
    Tape<double> tape;
    auto x = tape.parameter(point);
    auto y = f(x);
    analytic = tape.backward(y)[x];
  }

  auto evaluate = [&](const Tensor<double>& at) {
    Tape<double> tape;
    auto y = f(tape.constant(at));
    return y.value()[0];
  };

  GradCheckResult result;
  Tensor<double> probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + eps;
    const double up = evaluate(probe);
    probe[i] = point[i] - eps;
    const double down = evaluate(probe);
    probe[i] = point[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_difference_check: non-finite function value when perturbing coordinate " +
                         std::to_string(i));
    }
    const double numeric = (up - down) / (2 * eps);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > result.max_relative_error || i == 0) {
      result = GradCheckResult{rel, i, a, numeric};
    }
  }
  return result;
}

}  // namespace bonecheck
