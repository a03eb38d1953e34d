#include "cctr/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "cctr/error.hpp"

namespace cctr::ad {

namespace {

double evaluate(const Objective& f, const std::string& where) {
  Tape tape;
  const double v = f(tape).item();
  if (!std::isfinite(v)) throw ProbeError("grad_check: objective is not finite at " + where);
  return v;
}

}  // namespace

GradCheckResult grad_check(std::span<Parameter* const> params, const Objective& f,
                           double step) {
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = f(tape);
    if (!std::isfinite(loss.item())) throw ProbeError("grad_check: objective is not finite");
    tape.backward(loss);
    for (Parameter* p : params) analytic.push_back(tape.grad(*p));
  }

  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    const Tensor original = p.value;
    std::vector<double> probe = original.to_vector();
    for (std::size_t c = 0; c < probe.size(); ++c) {
      const double x0 = probe[c];
      const std::string where = p.name + "[" + std::to_string(c) + "]";
      probe[c] = x0 + step;
      p.value = Tensor(original.shape(), probe);
      const double up = evaluate(f, where);
      probe[c] = x0 - step;
      p.value = Tensor(original.shape(), probe);
      const double down = evaluate(f, where);
      probe[c] = x0;

      const double numeric = (up - down) / (2.0 * step);
      const double err =
          std::abs(analytic[pi][c] - numeric) / std::max(1e-8, std::abs(numeric));
      ++result.coordinates;
      if (err > result.max_rel_error || result.coordinates == 1) {
        result.max_rel_error = err;
        result.worst_param = p.name;
        result.worst_index = c;
        result.analytic = analytic[pi][c];
        result.numeric = numeric;
      }
    }
    p.value = original;
  }
  return result;
}

GradCheckResult grad_check(const std::function<Tensor(std::span<const Tensor>)>& f,
                           std::span<const Tensor> point, double step) {
  std::vector<Parameter> params;
  params.reserve(point.size());
  for (std::size_t i = 0; i < point.size(); ++i) {
    params.emplace_back("x" + std::to_string(i), point[i].detach());
  }
  std::vector<Parameter*> ptrs;
  for (auto& p : params) ptrs.push_back(&p);
  return grad_check(
      ptrs,
      [&](Tape& tape) {
        std::vector<Tensor> leaves;
        for (const auto& p : params) leaves.push_back(tape.param(p));
        return f(leaves);
      },
      step);
}

}  // namespace cctr::ad
