#include "damix/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace damix {

namespace {

double evaluate(const MultiFunction& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(tape.constant(t));
  return f(tape, vars).value().item();
}

double evaluate(const BoundFunction& f) {
  Tape tape;
  Binder bind(tape, false);
  return f(bind).value().item();
}

void record(GradCheckReport& report, std::size_t k, std::size_t i, double analytic, double numeric,
            const GradCheckOptions& options) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), options.scale_floor});
  const double rel = std::abs(analytic - numeric) / scale;
  if (!(rel <= report.max_rel_error)) {
    report.max_rel_error = std::isnan(rel) ? INFINITY : rel;
    report.worst_input = k;
    report.worst_element = i;
  }
}

}  // namespace

GradCheckReport check_gradients(const MultiFunction& f, const std::vector<Tensor>& inputs,
                                const GradCheckOptions& options) {
  GradCheckReport report;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(tape.leaf(t, true));
    Var out = f(tape, vars);
    tape.backward(out);
    for (const Var& v : vars) report.analytic.push_back(tape.grad(v));
  }

  std::vector<Tensor> probe = inputs;
  const double h = options.step;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    Tensor numeric(probe[k].shape(), 0.0);
    for (std::size_t i = 0; i < probe[k].size(); ++i) {
      const double x0 = probe[k][i];
      probe[k][i] = x0 + h;
      const double fp = evaluate(f, probe);
      probe[k][i] = x0 - h;
      const double fm = evaluate(f, probe);
      probe[k][i] = x0;
      numeric[i] = (fp - fm) / (2.0 * h);
      record(report, k, i, report.analytic[k][i], numeric[i], options);
    }
    report.numeric.push_back(std::move(numeric));
  }
  report.passed = report.max_rel_error <= options.tolerance;
  return report;
}

GradCheckReport check_gradients(const ScalarFunction& f, const Tensor& x, const GradCheckOptions& options) {
  MultiFunction g = [&f](Tape& tape, std::span<const Var> v) { return f(tape, v[0]); };
  return check_gradients(g, std::vector<Tensor>{x}, options);
}

GradCheckReport check_parameter_gradients(const BoundFunction& f, const std::vector<Tensor*>& params,
                                          const GradCheckOptions& options) {
  GradCheckReport report;
  {
    Tape tape;
    Binder bind(tape, true);
    Var out = f(bind);
    tape.backward(out);
    for (const Tensor* p : params) report.analytic.push_back(bind.grad(*p));
  }
  const double h = options.step;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    Tensor numeric(p.shape(), 0.0);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double x0 = p[i];
      p[i] = x0 + h;
      const double fp = evaluate(f);
      p[i] = x0 - h;
      const double fm = evaluate(f);
      p[i] = x0;
      numeric[i] = (fp - fm) / (2.0 * h);
      record(report, k, i, report.analytic[k][i], numeric[i], options);
    }
    report.numeric.push_back(std::move(numeric));
  }
  report.passed = report.max_rel_error <= options.tolerance;
  return report;
}

}  // namespace damix
