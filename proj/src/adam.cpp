#include "cctr/adam.hpp"

#include <cmath>

#include "cctr/error.hpp"

namespace cctr::ad {

AdamState make_adam_state(std::span<const Parameter* const> params, AdamConfig config) {
  AdamState s;
  s.config = config;
  for (const Parameter* p : params) {
    s.m.emplace_back(p->value.size(), 0.0);
    s.v.emplace_back(p->value.size(), 0.0);
  }
  return s;
}

AdamState make_adam_state(std::span<Parameter* const> params, AdamConfig config) {
  std::vector<const Parameter*> cp(params.begin(), params.end());
  return make_adam_state(std::span<const Parameter* const>(cp), config);
}

void adam_step(std::span<Parameter* const> params, std::span<const std::vector<double>> grads,
               AdamState& state, double lr) {
  if (grads.size() != params.size() || state.m.size() != params.size() ||
      state.v.size() != params.size()) {
    throw DimensionError("adam_step: " + std::to_string(params.size()) + " parameters, " +
                         std::to_string(grads.size()) + " gradients, " +
                         std::to_string(state.m.size()) + " moment buffers");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::size_t n = params[i]->value.size();
    if (grads[i].size() != n || state.m[i].size() != n || state.v[i].size() != n) {
      throw DimensionError("adam_step: size mismatch for parameter " + params[i]->name);
    }
  }
  const AdamConfig& c = state.config;
  if (lr < 0.0) lr = c.learning_rate;
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    std::vector<double> value = p.value.to_vector();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < value.size(); ++k) {
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      value[k] -= lr * mhat / (std::sqrt(vhat) + c.epsilon);
    }
    p.value = Tensor(p.value.shape(), std::move(value));
  }
}

}  // namespace cctr::ad
