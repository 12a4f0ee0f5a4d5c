#pragma once

#include <cmath>
#include <vector>

#include "damix/numerics/random.hpp"
#include "damix/numerics/tape.hpp"

namespace damix::test {

inline Tensor randn(Shape shape, Rng& rng, double scale = 1.0, double offset = 0.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = offset + scale * rng.normal();
  return t;
}

/// Uniform entries in [lo, hi).
inline Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace damix::test
