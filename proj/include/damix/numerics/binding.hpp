#pragma once

#include <utility>
#include <vector>

#include "damix/numerics/tape.hpp"

namespace damix {

enum class Mode { train, eval };

/// Places stored parameter tensors on a tape as leaves, once per tensor,
/// and hands gradients back after backward(). Keyed by tensor address, so
/// the parameters must outlive the binder and not be moved meanwhile.
class Binder {
 public:
  explicit Binder(Tape& tape, bool trainable = true) : tape_(&tape), trainable_(trainable) {}

  Var operator()(const Tensor& param) {
    for (const auto& [p, v] : bound_) {
      if (p == &param) return v;
    }
    Var v = tape_->leaf(param, trainable_);
    bound_.emplace_back(&param, v);
    return v;
  }

  Tape& tape() const { return *tape_; }
  bool trainable() const { return trainable_; }

  /// Gradient of a bound parameter; zeros when it never reached the tape.
  Tensor grad(const Tensor& param) const {
    for (const auto& [p, v] : bound_) {
      if (p == &param) return tape_->grad(v);
    }
    return Tensor(param.shape(), 0.0);
  }

 private:
  Tape* tape_;
  bool trainable_;
  std::vector<std::pair<const Tensor*, Var>> bound_;
};

}  // namespace damix
