#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dod/tensor.hpp"

namespace dod {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moments are bound positionally to the parameter list passed to adam_step.
struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

/// Bias-corrected Adam update, in place. Every parameter must carry a gradient.
void adam_step(std::span<Tensor> params, AdamState& state);

void zero_grad(std::span<Tensor> params);

}  // namespace dod
