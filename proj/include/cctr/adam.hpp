#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cctr/autodiff.hpp"

namespace cctr::ad {

struct AdamConfig {
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;
};

// Zero moments shaped like each parameter.
AdamState make_adam_state(std::span<const Parameter* const> params, AdamConfig config);
AdamState make_adam_state(std::span<Parameter* const> params, AdamConfig config);

// One bias-corrected Adam update. grads[i] pairs with params[i]; the
// parameter values are replaced, not mutated. lr < 0 uses the configured rate.
void adam_step(std::span<Parameter* const> params,
               std::span<const std::vector<double>> grads, AdamState& state,
               double lr = -1.0);

}  // namespace cctr::ad
