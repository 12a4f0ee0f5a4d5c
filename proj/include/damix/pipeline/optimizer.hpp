#pragma once

#include <map>
#include <string>
#include <vector>

#include "damix/numerics/tensor.hpp"

namespace damix::pipeline {

struct AdamConfig {
  double lr = 3.5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-4;
};

struct MomentState {
  Tensor m;
  Tensor v;
  std::int64_t step = 0;
};

/// Adam moments per named parameter. A parameter whose shape changed (e.g.
/// a classifier resized for new pseudo-labels) restarts from zero moments.
struct OptimizerState {
  std::map<std::string, MomentState> moments;
  void reset(const std::string& name) { moments.erase(name); }
};

struct NamedParam {
  std::string name;
  Tensor* value;
};

/// One Adam step with bias correction and decoupled weight decay:
///   p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p
/// `grads` is parallel to `params`. Throws TrainingAbort on a non-finite gradient.
void adam_step(const std::vector<NamedParam>& params, const std::vector<Tensor>& grads, OptimizerState& state,
               const AdamConfig& config);

}  // namespace damix::pipeline
