#include "damix/numerics/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "damix/errors.hpp"

namespace damix {

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = std::any_of(parents.begin(), parents.end(),
                                [this](std::size_t p) { return nodes_[p].requires_grad; });
  if (n.requires_grad) {
    n.parents = std::move(parents);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(const Var& root) {
  if (&root.tape() != this) throw StateError("backward root belongs to another tape");
  Node& r = nodes_[root.id()];
  if (r.value.size() != 1) {
    throw DimensionError("backward root must be scalar, got " + shape_to_string(r.value.shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor();
  r.grad = Tensor(r.value.shape(), 1.0);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    std::vector<Tensor> pg = n.backward(*this, n.grad);
    for (std::size_t k = 0; k < n.parents.size() && k < pg.size(); ++k) {
      if (pg[k].empty()) continue;
      Node& p = nodes_[n.parents[k]];
      if (!p.requires_grad) continue;
      if (pg[k].shape() != p.value.shape()) {
        throw DimensionError("gradient shape " + shape_to_string(pg[k].shape()) + " does not match value " +
                             shape_to_string(p.value.shape()));
      }
      if (p.grad.empty()) {
        p.grad = std::move(pg[k]);
      } else {
        auto dst = p.grad.data();
        auto src = pg[k].data();
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
      }
    }
  }
}

Tensor Tape::grad(const Var& v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
  return n.grad;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

void require_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw StateError("operands recorded on different tapes");
}

// Applies f(x, y) over the broadcast of a and b.
template <typename F>
Tensor broadcast_apply(const Tensor& a, const Tensor& b, F f) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  Tensor out(out_shape);
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  const std::size_t rank = out_shape.size();
  auto sa = strides_of(a.shape());
  auto sb = strides_of(b.shape());
  for (std::size_t d = 0; d < rank; ++d) {
    if (a.shape()[d] == 1) sa[d] = 0;
    if (b.shape()[d] == 1) sb[d] = 0;
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = f(a[ia], b[ib]);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out_shape[d]) break;
      ia -= sa[d] * idx[d];
      ib -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
  return out;
}

// Broadcast `small` to the shape `full`.
Tensor expand_to(const Tensor& small, const Shape& full) {
  return broadcast_apply(Tensor(full, 0.0), small, [](double, double y) { return y; });
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

Shape reduced_shape(const Shape& s, const std::vector<std::size_t>& axes, bool keepdims) {
  Shape out;
  for (std::size_t d = 0; d < s.size(); ++d) {
    const bool reduced = std::find(axes.begin(), axes.end(), d) != axes.end();
    if (!reduced) {
      out.push_back(s[d]);
    } else if (keepdims) {
      out.push_back(1);
    }
  }
  if (out.empty()) out.push_back(1);
  return out;
}

Shape keepdims_shape(const Shape& s, const std::vector<std::size_t>& axes) {
  Shape out = s;
  for (std::size_t a : axes) out[a] = 1;
  return out;
}

void validate_axes(const Shape& s, std::vector<std::size_t>& axes) {
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  for (std::size_t a : axes) {
    if (a >= s.size()) {
      throw DimensionError("reduction axis " + std::to_string(a) + " out of range for " + shape_to_string(s));
    }
  }
}

Tensor reduce_sum_keep(const Tensor& x, const std::vector<std::size_t>& axes) {
  return sum_to(x, keepdims_shape(x.shape(), axes));
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a.size() != b.size()) {
    throw DimensionError("broadcast rank mismatch " + shape_to_string(a) + " vs " + shape_to_string(b));
  }
  Shape out(a.size());
  for (std::size_t d = 0; d < a.size(); ++d) {
    if (a[d] == b[d] || b[d] == 1) {
      out[d] = a[d];
    } else if (a[d] == 1) {
      out[d] = b[d];
    } else {
      throw DimensionError("shapes " + shape_to_string(a) + " and " + shape_to_string(b) +
                           " are not broadcast-compatible");
    }
  }
  return out;
}

Tensor sum_to(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  if (g.rank() != target.size()) {
    throw DimensionError("sum_to rank mismatch " + shape_to_string(g.shape()) + " -> " + shape_to_string(target));
  }
  Tensor out(target, 0.0);
  const std::size_t rank = target.size();
  auto so = strides_of(target);
  for (std::size_t d = 0; d < rank; ++d) {
    if (target[d] == 1) {
      so[d] = 0;
    } else if (target[d] != g.shape()[d]) {
      throw DimensionError("sum_to extent mismatch " + shape_to_string(g.shape()) + " -> " + shape_to_string(target));
    }
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t io = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    out[io] += g[i];
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      io += so[d];
      if (idx[d] < g.shape()[d]) break;
      io -= so[d] * idx[d];
      idx[d] = 0;
    }
  }
  return out;
}

// -- elementwise ------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require_same_tape(a, b);
  Tensor out = broadcast_apply(a.value(), b.value(), [](double x, double y) { return x + y; });
  const Shape sa = a.shape(), sb = b.shape();
  return a.tape().record(std::move(out), {a.id(), b.id()}, [sa, sb](const Tape&, const Tensor& g) {
    return std::vector<Tensor>{sum_to(g, sa), sum_to(g, sb)};
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_tape(a, b);
  Tensor out = broadcast_apply(a.value(), b.value(), [](double x, double y) { return x - y; });
  const Shape sa = a.shape(), sb = b.shape();
  return a.tape().record(std::move(out), {a.id(), b.id()}, [sa, sb](const Tape&, const Tensor& g) {
    return std::vector<Tensor>{sum_to(g, sa), sum_to(map(sum_to(g, sb), [](double v) { return -v; }), sb)};
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  Tensor out = broadcast_apply(a.value(), b.value(), [](double x, double y) { return x * y; });
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](const Tape& t, const Tensor& g) {
    const Tensor& va = t.value(ia);
    const Tensor& vb = t.value(ib);
    std::vector<Tensor> r(2);
    if (t.requires_grad(ia)) {
      r[0] = sum_to(broadcast_apply(g, expand_to(vb, g.shape()), [](double x, double y) { return x * y; }), va.shape());
    }
    if (t.requires_grad(ib)) {
      r[1] = sum_to(broadcast_apply(g, expand_to(va, g.shape()), [](double x, double y) { return x * y; }), vb.shape());
    }
    return r;
  });
}

Var div(const Var& a, const Var& b) {
  require_same_tape(a, b);
  for (double v : b.value().data()) {
    if (v == 0.0) throw NumericError("division by exact zero");
  }
  Tensor out = broadcast_apply(a.value(), b.value(), [](double x, double y) { return x / y; });
  const std::size_t ia = a.id(), ib = b.id(), io = a.tape().size();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib, io](const Tape& t, const Tensor& g) {
    const Tensor& va = t.value(ia);
    const Tensor& vb = t.value(ib);
    const Tensor bx = expand_to(vb, g.shape());
    std::vector<Tensor> r(2);
    if (t.requires_grad(ia)) {
      r[0] = sum_to(broadcast_apply(g, bx, [](double x, double y) { return x / y; }), va.shape());
    }
    if (t.requires_grad(ib)) {
      // d(a/b)/db = -(a/b)/b
      const Tensor& q = t.value(io);
      Tensor gb(g.shape());
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = -g[i] * q[i] / bx[i];
      r[1] = sum_to(gb, vb.shape());
    }
    return r;
  });
}

Var add_scalar(const Var& a, double s) {
  return a.tape().record(map(a.value(), [s](double x) { return x + s; }), {a.id()},
                         [](const Tape&, const Tensor& g) { return std::vector<Tensor>{g}; });
}

Var mul_scalar(const Var& a, double s) {
  return a.tape().record(map(a.value(), [s](double x) { return x * s; }), {a.id()},
                         [s](const Tape&, const Tensor& g) {
                           return std::vector<Tensor>{map(g, [s](double v) { return v * s; })};
                         });
}

Var neg(const Var& a) { return mul_scalar(a, -1.0); }

Var sigmoid(const Var& a) {
  Tensor out = map(a.value(), [](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
  const std::size_t io = a.tape().size();
  return a.tape().record(std::move(out), {a.id()}, [io](const Tape& t, const Tensor& g) {
    const Tensor& s = t.value(io);
    Tensor r(g.shape());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = g[i] * s[i] * (1.0 - s[i]);
    return std::vector<Tensor>{std::move(r)};
  });
}

Var leaky_relu(const Var& a, double slope) {
  Tensor out = map(a.value(), [slope](double x) { return x > 0 ? x : slope * x; });
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, slope](const Tape& t, const Tensor& g) {
    const Tensor& x = t.value(ia);
    Tensor r(g.shape());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = x[i] > 0 ? g[i] : slope * g[i];
    return std::vector<Tensor>{std::move(r)};
  });
}

Var relu(const Var& a) { return clamp_min(a, 0.0); }

Var clamp_min(const Var& a, double floor) {
  Tensor out = map(a.value(), [floor](double x) { return x > floor ? x : floor; });
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, floor](const Tape& t, const Tensor& g) {
    const Tensor& x = t.value(ia);
    Tensor r(g.shape());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = x[i] > floor ? g[i] : 0.0;
    return std::vector<Tensor>{std::move(r)};
  });
}

Var exp(const Var& a) {
  Tensor out = map(a.value(), [](double x) { return std::exp(x); });
  const std::size_t io = a.tape().size();
  return a.tape().record(std::move(out), {a.id()}, [io](const Tape& t, const Tensor& g) {
    const Tensor& e = t.value(io);
    Tensor r(g.shape());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = g[i] * e[i];
    return std::vector<Tensor>{std::move(r)};
  });
}

Var log(const Var& a) {
  for (double v : a.value().data()) {
    if (!(v > 0.0)) throw NumericError("log of non-positive value");
  }
  Tensor out = map(a.value(), [](double x) { return std::log(x); });
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](const Tape& t, const Tensor& g) {
    const Tensor& x = t.value(ia);
    Tensor r(g.shape());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = g[i] / x[i];
    return std::vector<Tensor>{std::move(r)};
  });
}

Var sqrt(const Var& a) {
  for (double v : a.value().data()) {
    if (v < 0.0) throw NumericError("sqrt of negative value");
  }
  Tensor out = map(a.value(), [](double x) { return std::sqrt(x); });
  const std::size_t io = a.tape().size();
  return a.tape().record(std::move(out), {a.id()}, [io](const Tape& t, const Tensor& g) {
    const Tensor& s = t.value(io);
    Tensor r(g.shape());
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (s[i] == 0.0) throw NumericError("sqrt gradient at zero");
      r[i] = g[i] * 0.5 / s[i];
    }
    return std::vector<Tensor>{std::move(r)};
  });
}

Var square(const Var& a) {
  Tensor out = map(a.value(), [](double x) { return x * x; });
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](const Tape& t, const Tensor& g) {
    const Tensor& x = t.value(ia);
    Tensor r(g.shape());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = 2.0 * x[i] * g[i];
    return std::vector<Tensor>{std::move(r)};
  });
}

// -- reductions -------------------------------------------------------------

Var sum(const Var& a, std::vector<std::size_t> axes, bool keepdims) {
  const Shape in = a.shape();
  validate_axes(in, axes);
  Tensor kept = reduce_sum_keep(a.value(), axes);
  Tensor out = kept.reshaped(reduced_shape(in, axes, keepdims));
  const Shape kshape = kept.shape();
  return a.tape().record(std::move(out), {a.id()}, [in, kshape](const Tape&, const Tensor& g) {
    return std::vector<Tensor>{expand_to(g.reshaped(kshape), in)};
  });
}

Var mean(const Var& a, std::vector<std::size_t> axes, bool keepdims) {
  validate_axes(a.shape(), axes);
  std::size_t count = 1;
  for (std::size_t ax : axes) count *= a.shape()[ax];
  if (count == 0) throw NumericError("mean over empty extent");
  return mul_scalar(sum(a, axes, keepdims), 1.0 / static_cast<double>(count));
}

Var var(const Var& a, std::vector<std::size_t> axes, bool keepdims) {
  validate_axes(a.shape(), axes);
  Var mu = mean(a, axes, true);
  return mean(square(sub(a, mu)), axes, keepdims);
}

Var sum_all(const Var& a) {
  std::vector<std::size_t> axes(a.shape().size());
  std::iota(axes.begin(), axes.end(), 0);
  return sum(a, axes, false);
}

Var mean_all(const Var& a) {
  std::vector<std::size_t> axes(a.shape().size());
  std::iota(axes.begin(), axes.end(), 0);
  return mean(a, axes, false);
}

// -- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw DimensionError("matmul shape mismatch " + shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor out({m, n}, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects a matrix, got " + shape_to_string(a.shape()));
  const std::size_t m = a.extent(0), n = a.extent(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

Var matmul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  Tensor out = matmul(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](const Tape& t, const Tensor& g) {
    std::vector<Tensor> r(2);
    if (t.requires_grad(ia)) r[0] = matmul(g, transpose(t.value(ib)));
    if (t.requires_grad(ib)) r[1] = matmul(transpose(t.value(ia)), g);
    return r;
  });
}

Var transpose(const Var& a) {
  return a.tape().record(transpose(a.value()), {a.id()}, [](const Tape&, const Tensor& g) {
    return std::vector<Tensor>{transpose(g)};
  });
}

Var reshape(const Var& a, Shape shape) {
  const Shape in = a.shape();
  return a.tape().record(a.value().reshaped(std::move(shape)), {a.id()},
                         [in](const Tape&, const Tensor& g) { return std::vector<Tensor>{g.reshaped(in)}; });
}

namespace {

Tensor swap_last(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("swap_last_axes expects rank 3, got " + shape_to_string(x.shape()));
  const std::size_t n = x.extent(0), p = x.extent(1), q = x.extent(2);
  Tensor out({n, q, p});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j)
      for (std::size_t k = 0; k < q; ++k) out.at(i, k, j) = x.at(i, j, k);
  return out;
}

}  // namespace

Var swap_last_axes(const Var& a) {
  return a.tape().record(swap_last(a.value()), {a.id()},
                         [](const Tape&, const Tensor& g) { return std::vector<Tensor>{swap_last(g)}; });
}

Var index_rows(const Var& a, std::span<const std::size_t> rows) {
  const Tensor& x = a.value();
  if (x.rank() == 0 || rows.empty()) throw DimensionError("index_rows needs a non-empty row list");
  const std::size_t stride = x.size() / x.extent(0);
  Shape s = x.shape();
  s[0] = rows.size();
  std::vector<double> data;
  data.reserve(rows.size() * stride);
  for (std::size_t r : rows) {
    if (r >= x.extent(0)) throw DimensionError("row index " + std::to_string(r) + " out of range");
    data.insert(data.end(), x.data().begin() + static_cast<std::ptrdiff_t>(r * stride),
                x.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * stride));
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const Shape in = x.shape();
  return a.tape().record(Tensor(std::move(s), std::move(data)), {a.id()},
                         [idx, in, stride](const Tape&, const Tensor& g) {
                           Tensor r(in, 0.0);
                           for (std::size_t k = 0; k < idx.size(); ++k)
                             for (std::size_t j = 0; j < stride; ++j) r[idx[k] * stride + j] += g[k * stride + j];
                           return std::vector<Tensor>{std::move(r)};
                         });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  Tape& tape = parts[0].tape();
  Shape s = parts[0].shape();
  std::size_t rows = 0;
  std::vector<std::size_t> ids, offsets;
  std::vector<double> data;
  for (const Var& p : parts) {
    Shape ps = p.shape();
    if (ps.size() != s.size() || !std::equal(ps.begin() + 1, ps.end(), s.begin() + 1)) {
      throw DimensionError("concat_rows trailing shape mismatch " + shape_to_string(ps) + " vs " + shape_to_string(s));
    }
    offsets.push_back(data.size());
    ids.push_back(p.id());
    rows += ps[0];
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  }
  s[0] = rows;
  std::vector<Shape> shapes;
  for (const Var& p : parts) shapes.push_back(p.shape());
  return tape.record(Tensor(std::move(s), std::move(data)), ids, [offsets, shapes](const Tape&, const Tensor& g) {
    std::vector<Tensor> r;
    for (std::size_t k = 0; k < shapes.size(); ++k) {
      const std::size_t n = shape_size(shapes[k]);
      r.emplace_back(shapes[k], std::vector<double>(g.data().begin() + static_cast<std::ptrdiff_t>(offsets[k]),
                                                    g.data().begin() + static_cast<std::ptrdiff_t>(offsets[k] + n)));
    }
    return r;
  });
}

Var take(const Var& a, std::span<const std::size_t> flat_indices) {
  const Tensor& x = a.value();
  if (flat_indices.empty()) throw DimensionError("take needs at least one index");
  std::vector<double> data;
  data.reserve(flat_indices.size());
  for (std::size_t i : flat_indices) {
    if (i >= x.size()) throw DimensionError("take index " + std::to_string(i) + " out of range");
    data.push_back(x[i]);
  }
  std::vector<std::size_t> idx(flat_indices.begin(), flat_indices.end());
  const Shape in = x.shape();
  return a.tape().record(Tensor::vector(std::move(data)), {a.id()}, [idx, in](const Tape&, const Tensor& g) {
    Tensor r(in, 0.0);
    for (std::size_t k = 0; k < idx.size(); ++k) r[idx[k]] += g[k];
    return std::vector<Tensor>{std::move(r)};
  });
}

Var log_softmax(const Var& a) {
  const Tensor& x = a.value();
  if (x.rank() != 2) throw DimensionError("log_softmax expects a matrix, got " + shape_to_string(x.shape()));
  const std::size_t n = x.extent(0), k = x.extent(1);
  Tensor out({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    double m = x.at(i, 0);
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, x.at(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(x.at(i, j) - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < k; ++j) out.at(i, j) = x.at(i, j) - lse;
  }
  const std::size_t io = a.tape().size();
  return a.tape().record(std::move(out), {a.id()}, [io, n, k](const Tape& t, const Tensor& g) {
    const Tensor& y = t.value(io);
    Tensor r({n, k});
    for (std::size_t i = 0; i < n; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < k; ++j) gs += g.at(i, j);
      for (std::size_t j = 0; j < k; ++j) r.at(i, j) = g.at(i, j) - std::exp(y.at(i, j)) * gs;
    }
    return std::vector<Tensor>{std::move(r)};
  });
}

Var detach(const Var& a) { return a.tape().constant(a.value()); }

}  // namespace damix
