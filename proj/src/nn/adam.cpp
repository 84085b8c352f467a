#include "mfr/adam.hpp"

#include <cmath>

#include "mfr/error.hpp"

namespace mfr {

void adam_step(std::span<Parameter> params, AdamState& state) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(p.trainable ? Tensor(p.value.shape()) : Tensor());
      state.v.push_back(p.trainable ? Tensor(p.value.shape()) : Tensor());
    }
  }
  if (state.m.size() != params.size()) {
    fail(ErrorKind::dimension, "adam state tracks " + std::to_string(state.m.size()) +
                                   " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (!p.trainable) continue;
    require_same_shape(p.value, p.grad, "adam_step");
    require_same_shape(p.value, state.m[i], "adam_step moments");
    if (!p.grad.all_finite()) {
      fail(ErrorKind::non_finite_gradient, "gradient of '" + p.name + "' is not finite");
    }
  }

  ++state.t;
  const auto& c = state.config;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.trainable) continue;
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p.value[j] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

}  // namespace mfr
