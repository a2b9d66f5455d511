#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "attncal/nd/tensor.hpp"

namespace attncal::nd {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global gradient-norm clip applied before the update; 0 disables.
  double clip_norm = 0.0;
};

struct OptimizerState {
  AdamConfig config;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::size_t step = 0;
};

OptimizerState make_optimizer_state(std::span<const NamedTensor> params, AdamConfig config);

// One bias-corrected Adam update in place on each parameter's buffer from its
// accumulated gradient (a parameter without a gradient is treated as zero).
// Throws NumericError naming the first parameter with a non-finite gradient;
// nothing is modified in that case.
void optimizer_step(std::span<NamedTensor> params, OptimizerState& state);

void zero_grads(std::span<NamedTensor> params);

}  // namespace attncal::nd
