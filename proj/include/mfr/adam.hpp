#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "mfr/parameter.hpp"

namespace mfr {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t t = 0;
  // One moment pair per parameter slot; buffers keep empty tensors.
  std::vector<Tensor> m, v;
};

/// Bias-corrected Adam over every trainable parameter. Moments are created
/// lazily on the first step. All gradients are validated before any value
/// changes, so a non-finite gradient leaves parameters and state untouched.
void adam_step(std::span<Parameter> params, AdamState& state);

}  // namespace mfr
