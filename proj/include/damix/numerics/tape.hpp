#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "damix/numerics/tensor.hpp"

namespace damix {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode gradient tape. Nodes are appended in evaluation order and
/// replayed in reverse by backward(). Single-writer: one pass owns a tape.
class Tape {
 public:
  /// Computes parent gradients from the node's output gradient. Entries left
  /// empty mean "no contribution".
  using BackwardFn = std::function<std::vector<Tensor>(const Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Appends an interior node. requires_grad is inherited from the parents.
  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward);

  /// Seeds d(root)/d(root) = 1 and accumulates gradients into every
  /// requires_grad node reachable from root. root must hold one element.
  void backward(const Var& root);

  /// Accumulated gradient of v; zeros of v's shape when nothing flowed.
  Tensor grad(const Var& v) const;

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// -- elementwise ------------------------------------------------------------
// Binary ops require equal rank; each extent must match or be 1 on one side.

Shape broadcast_shape(const Shape& a, const Shape& b);
/// Sums g down to `target` along broadcast (unit) axes.
Tensor sum_to(const Tensor& g, const Shape& target);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
/// Throws NumericError when any divisor element is exactly zero.
Var div(const Var& a, const Var& b);

Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);
Var neg(const Var& a);

Var sigmoid(const Var& a);
Var leaky_relu(const Var& a, double slope = 0.01);
Var relu(const Var& a);
Var exp(const Var& a);
/// Throws NumericError on non-positive input.
Var log(const Var& a);
/// Throws NumericError on negative input.
Var sqrt(const Var& a);
Var square(const Var& a);
/// max(a, floor); gradient is zero where the floor is active.
Var clamp_min(const Var& a, double floor);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator*(const Var& a, double s) { return mul_scalar(a, s); }
inline Var operator*(double s, const Var& a) { return mul_scalar(a, s); }
inline Var operator+(const Var& a, double s) { return add_scalar(a, s); }
inline Var operator-(const Var& a) { return neg(a); }

// -- reductions -------------------------------------------------------------

Var sum(const Var& a, std::vector<std::size_t> axes, bool keepdims = false);
Var mean(const Var& a, std::vector<std::size_t> axes, bool keepdims = false);
/// Biased (divide-by-N) variance.
Var var(const Var& a, std::vector<std::size_t> axes, bool keepdims = false);
Var sum_all(const Var& a);
Var mean_all(const Var& a);

// -- linear algebra and structure --------------------------------------------

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, Shape shape);
/// [N, A, B] -> [N, B, A].
Var swap_last_axes(const Var& a);
/// Gathers slices of the leading axis (repeats allowed).
Var index_rows(const Var& a, std::span<const std::size_t> rows);
/// Concatenates along the leading axis.
Var concat_rows(std::span<const Var> parts);
/// Gathers flat elements into a rank-1 tensor.
Var take(const Var& a, std::span<const std::size_t> flat_indices);
/// Row-wise log-softmax of a 2-D tensor.
Var log_softmax(const Var& a);
/// Constant copy of a's value; gradients stop here.
Var detach(const Var& a);

// -- plain tensor helpers (no taping) ---------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

}  // namespace damix
