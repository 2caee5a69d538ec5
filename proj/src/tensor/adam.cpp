#include "lungrisk/adam.hpp"

#include <cmath>

#include "lungrisk/errors.hpp"

namespace lungrisk {

void adam_step(std::span<const NamedParam> params, std::span<const Tensor> grads, AdamState& state) {
  if (params.size() != grads.size()) throw DimensionError("adam_step: one gradient per parameter required");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(*params[i].tensor, grads[i], params[i].name.c_str());
    if (!grads[i].all_finite()) throw NumericError("adam_step: non-finite gradient for parameter '" + params[i].name + "'");
  }
  if (state.first_moment.empty()) {
    for (const NamedParam& p : params) {
      state.first_moment.emplace_back(p.tensor->shape());
      state.second_moment.emplace_back(p.tensor->shape());
    }
  }
  if (state.first_moment.size() != params.size())
    throw DimensionError("adam_step: optimizer state tracks a different parameter set");

  const AdamConfig& c = state.config;
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i].tensor;
    Tensor& m = state.first_moment[i];
    Tensor& v = state.second_moment[i];
    require_same_shape(p, m, params[i].name.c_str());
    const Tensor& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
      const double m_hat = m[k] / correction1;
      const double v_hat = v[k] / correction2;
      p[k] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
  }
}

}  // namespace lungrisk
