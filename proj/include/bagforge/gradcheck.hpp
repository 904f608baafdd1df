#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "bagforge/error.hpp"
#include "bagforge/tensor.hpp"

namespace bagforge {

template <class T>
struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares tape gradients of a scalar function against central differences
/// (f(x+h) - f(x-h)) / 2h on every coordinate of `params`. The relative
/// error uses max(|analytic|, |numeric|, 1e-8) as denominator.
///
/// `loss_fn` must be deterministic and build its graph on the tape it is
/// given.
template <class T>
GradCheckResult<T> finite_diff_check(
    const std::function<BasicTensor<T>(Tape&)>& loss_fn,
    const std::vector<BasicTensor<T>>& params, double h = 1e-3) {
  if (!(h > 0.0)) throw DomainError("finite_diff_check: h must be positive");

  for (const auto& p : params) p.zero_grad();
  {
    Tape tape;
    auto loss = loss_fn(tape);
    if (!std::isfinite(static_cast<double>(loss.item()))) {
      throw NumericError("finite_diff_check: non-finite loss");
    }
    tape.backward(loss);
  }

  auto evaluate = [&]() {
    Tape tape = Tape::inference();
    const double v = static_cast<double>(loss_fn(tape).item());
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite loss");
    return v;
  };

  GradCheckResult<T> result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto values = params[p].mutable_data();
    const std::vector<T> analytic(params[p].grad().begin(), params[p].grad().end());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T saved = values[i];
      values[i] = static_cast<T>(saved + h);
      const double up = evaluate();
      values[i] = static_cast<T>(saved - h);
      const double down = evaluate();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = static_cast<double>(analytic[i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > result.max_relative_error) {
        result = {rel, p, i, a, numeric};
      }
    }
  }
  return result;
}

}  // namespace bagforge
