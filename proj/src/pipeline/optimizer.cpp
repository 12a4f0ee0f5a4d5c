#include "damix/pipeline/optimizer.hpp"

#include <cmath>

#include "damix/errors.hpp"

namespace damix::pipeline {

void adam_step(const std::vector<NamedParam>& params, const std::vector<Tensor>& grads, OptimizerState& state,
               const AdamConfig& config) {
  if (params.size() != grads.size()) throw DimensionError("adam_step: parameter and gradient counts differ");
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor& g = grads[k];
    if (g.shape() != params[k].value->shape()) {
      throw DimensionError("adam_step: gradient of " + params[k].name + " has shape " + shape_to_string(g.shape()));
    }
    for (double x : g.data()) {
      if (!std::isfinite(x)) throw TrainingAbort("non-finite gradient for parameter " + params[k].name);
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k].value;
    const Tensor& g = grads[k];
    MomentState& s = state.moments[params[k].name];
    if (s.m.shape() != p.shape()) s = MomentState{Tensor(p.shape(), 0.0), Tensor(p.shape(), 0.0), 0};
    ++s.step;
    const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(s.step));
    for (std::size_t i = 0; i < p.size(); ++i) {
      s.m[i] = config.beta1 * s.m[i] + (1.0 - config.beta1) * g[i];
      s.v[i] = config.beta2 * s.v[i] + (1.0 - config.beta2) * g[i] * g[i];
      const double m_hat = s.m[i] / c1;
      const double v_hat = s.v[i] / c2;
      p[i] -= config.lr * (m_hat / (std::sqrt(v_hat) + config.eps) + config.weight_decay * p[i]);
    }
  }
}

}  // namespace damix::pipeline
