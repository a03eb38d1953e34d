#pragma once

// Registry of differentiable targets for the gradient check command: every
// primitive op, every model block, every loss and the composed objective.

#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cctr/gradcheck.hpp"

namespace cctr::suite {

inline constexpr double kTolerance = 1e-4;
inline constexpr double kStep = 1e-5;

struct Target {
  std::string name;
  std::string group;  // primitive | block | loss | model
  std::function<ad::GradCheckResult()> run;
};

// Small dimensions: d = 8, n = 5, b = 2, two heads of width 4, one layer each.
std::vector<Target> gradcheck_targets(std::uint64_t seed);

struct Outcome {
  std::string name;
  std::string group;
  ad::GradCheckResult result;
  bool passed = false;
  std::string error;  // set when the target threw
};

struct Report {
  std::vector<Outcome> outcomes;
  bool passed() const;
  std::size_t failures() const;
};

// Runs each target; writes one line per target to out when given.
Report run_targets(std::span<const Target> targets, double tolerance, std::ostream* out);

}  // namespace cctr::suite
