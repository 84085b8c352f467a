#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mfr/tensor.hpp"

namespace mfr {

using ScalarFn = std::function<double(const std::vector<Tensor>&)>;
using GradientFn = std::function<std::vector<Tensor>(const std::vector<Tensor>&)>;

/// Compares `analytic(inputs)` against central differences of `loss` in
/// every coordinate of every input. Returns the maximum over coordinates of
///   |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
/// Inputs must keep at least 10*h away from any kink of `loss`.
double grad_check(const ScalarFn& loss, const GradientFn& analytic, std::vector<Tensor> inputs,
                  double h = 1e-5);

struct GradCheckResult {
  std::string op;
  std::size_t trials = 0;
  double max_error = 0.0;
};

/// Runs grad_check on every differentiable layer operation with `trials`
/// random smooth inputs each. Ops whose output is a tensor are reduced to a
/// scalar through a fixed random projection <y, R>.
std::vector<GradCheckResult> run_gradient_suite(std::size_t trials, double h,
                                                std::uint64_t seed);

}  // namespace mfr
