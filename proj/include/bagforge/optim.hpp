#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "bagforge/aggregators.hpp"
#include "bagforge/error.hpp"
#include "bagforge/tensor.hpp"

namespace bagforge {

struct AdamWConfig {
  double lr = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// First/second moment buffers, one pair per parameter tensor, in the order
/// of the NamedTensors they were created for.
template <class T>
struct OptState {
  AdamWConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  OptState() = default;
  OptState(AdamWConfig cfg, const NamedTensors<T>& params) : config(cfg) {
    for (const auto& [name, t] : params) {
      m.emplace_back(t.size(), T(0));
      v.emplace_back(t.size(), T(0));
    }
  }
};

/// One AdamW update: decoupled decay theta *= (1 - lr*lambda), then the
/// bias-corrected Adam step. Throws NumericError naming the first tensor
/// whose gradient is not finite, before touching any parameter.
template <class T>
void adamw_step(const NamedTensors<T>& params, OptState<T>& state) {
  if (state.m.size() != params.size()) {
    throw ShapeError("adamw_step: optimiser state tracks " +
                     std::to_string(state.m.size()) + " tensors, got " +
                     std::to_string(params.size()));
  }
  for (const auto& [name, t] : params) {
    for (const T g : t.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("adamw_step: non-finite gradient in '" + name + "'");
      }
    }
  }
  const auto& c = state.config;
  ++state.step;
  const double t_step = static_cast<double>(state.step);
  const T bc1 = static_cast<T>(1.0 - std::pow(c.beta1, t_step));
  const T bc2 = static_cast<T>(1.0 - std::pow(c.beta2, t_step));
  const T lr = static_cast<T>(c.lr);
  const T decay = static_cast<T>(1.0 - c.lr * c.weight_decay);
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T eps = static_cast<T>(c.eps);

  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto& t = params[p].second;
    const auto theta = t.mutable_data();
    const auto grad = t.grad();
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const T g = grad[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      const T m_hat = m[i] / bc1;
      const T v_hat = v[i] / bc2;
      theta[i] = theta[i] * decay - lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

}  // namespace bagforge
