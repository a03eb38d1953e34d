#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cctr/autodiff.hpp"

namespace cctr::ad {

struct GradCheckResult {
  double max_rel_error = 0.0;
  // Location of the worst coordinate.
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

// Objective evaluated on a fresh tape; must bind parameters via tape.param.
using Objective = std::function<Tensor(Tape&)>;

// Compares backward() against central differences over every coordinate of
// every parameter:  max |analytic - numeric| / max(1e-8, |numeric|).
// Throws ProbeError if the objective is non-finite at a probe point.
// Parameter values are restored before returning.
GradCheckResult grad_check(std::span<Parameter* const> params, const Objective& f,
                           double step = 1e-5);

// Point form: f receives the point as taped leaves.
GradCheckResult grad_check(const std::function<Tensor(std::span<const Tensor>)>& f,
                           std::span<const Tensor> point, double step = 1e-5);

}  // namespace cctr::ad
