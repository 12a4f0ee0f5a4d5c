#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "damix/numerics/binding.hpp"
#include "damix/numerics/tape.hpp"

namespace damix {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor for the relative error so near-zero gradients are
  /// compared on an absolute scale.
  double scale_floor = 1e-3;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  bool passed = true;
  std::size_t worst_input = 0;
  std::size_t worst_element = 0;
  std::vector<Tensor> analytic;
  std::vector<Tensor> numeric;
};

/// Scalar function of several tensors, recorded on the given tape.
using MultiFunction = std::function<Var(Tape&, std::span<const Var>)>;
using ScalarFunction = std::function<Var(Tape&, const Var&)>;

/// Compares tape gradients of f against central differences
/// (f(x+h) - f(x-h)) / 2h for every element of every input.
GradCheckReport check_gradients(const MultiFunction& f, const std::vector<Tensor>& inputs,
                                const GradCheckOptions& options = {});

GradCheckReport check_gradients(const ScalarFunction& f, const Tensor& x, const GradCheckOptions& options = {});

/// Scalar function of stored parameters reached through a Binder.
using BoundFunction = std::function<Var(Binder&)>;

/// Same comparison for parameters held outside the tape: the analytic pass
/// reads Binder::grad, the probes perturb each tensor in place and restore it.
GradCheckReport check_parameter_gradients(const BoundFunction& f, const std::vector<Tensor*>& params,
                                          const GradCheckOptions& options = {});

}  // namespace damix
