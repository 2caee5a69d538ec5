#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lungrisk/tensor.hpp"

namespace lungrisk {

struct NamedParam {
  std::string name;
  Tensor* tensor;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::uint64_t step_count = 0;
};

// One bias-corrected Adam update. Moments are created on the first call and
// must mirror `params` afterwards. A non-finite gradient aborts the step
// before anything is modified and names the offending parameter.
void adam_step(std::span<const NamedParam> params, std::span<const Tensor> grads, AdamState& state);

}  // namespace lungrisk
