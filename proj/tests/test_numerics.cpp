#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "damix/errors.hpp"
#include "damix/numerics/binding.hpp"
#include "damix/numerics/gradcheck.hpp"
#include "damix/numerics/tensor_io.hpp"
#include "support.hpp"

using namespace damix;
using damix::test::randn;
using damix::test::uniform;

TEST_CASE("matmul small cases") {
  const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(matmul(Tensor::identity(2), m) == m);
  CHECK(matmul(Tensor({2, 2}, 0.0), m) == Tensor({2, 2}, 0.0));
  // Dot products by hand: 1*5+2*7, 1*6+2*8, 3*5+4*7, 3*6+4*8.
  CHECK(matmul(m, Tensor::matrix({{5, 6}, {7, 8}})) == Tensor::matrix({{19, 22}, {43, 50}}));
  CHECK_THROWS_AS(matmul(m, Tensor({3, 2}, 1.0)), DimensionError);
}

TEST_CASE("matmul is associative on random triples") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t a = 1 + rng.index(5), b = 1 + rng.index(5), c = 1 + rng.index(5), d = 1 + rng.index(5);
    const Tensor x = randn({a, b}, rng), y = randn({b, c}, rng), z = randn({c, d}, rng);
    const Tensor l = matmul(matmul(x, y), z), r = matmul(x, matmul(y, z));
    double scale = 0.0;
    for (double v : l.data()) scale = std::max(scale, std::abs(v));
    CHECK(max_abs_diff(l, r) <= 1e-10 * std::max(scale, 1.0));
  }
}

TEST_CASE("elementwise values") {
  Tape t;
  CHECK(sigmoid(t.constant(Tensor::scalar(0.0))).value().item() == 0.5);
  CHECK(leaky_relu(t.constant(Tensor::scalar(-1.0)), 0.01).value().item() == doctest::Approx(-0.01).epsilon(1e-15));
  CHECK(sigmoid(t.constant(Tensor::scalar(1.0))).value().item() == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-15));
  CHECK(sigmoid(t.constant(Tensor::scalar(1.0))).value().item() == doctest::Approx(0.7310585786).epsilon(1e-10));
  CHECK_THROWS_AS(div(t.constant(Tensor::vector({1, 2})), t.constant(Tensor::vector({1, 0}))), NumericError);
}

TEST_CASE("reductions") {
  Tape t;
  CHECK(mean_all(t.constant(Tensor::vector({1, 3}))).value().item() == 2.0);
  CHECK(var(t.constant(Tensor::vector({1, 3})), {0}).value().item() == 1.0);
  CHECK(mean(t.constant(Tensor::matrix({{1, 2}, {3, 4}})), {0}).value() == Tensor::vector({2, 3}));
}

TEST_CASE("broadcast gradient equals gradient of the pre-broadcast sum") {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 1 + rng.index(4), c = 1 + rng.index(4);
    const Tensor a = randn({n, c}, rng), row = randn({1, c}, rng), w = randn({n, c}, rng);
    Tape t;
    Var va = t.leaf(a, true), vr = t.leaf(row, true);
    t.backward(sum_all((va + vr) * t.constant(w)));
    // d/d(row) sums the per-row contributions: column sums of w.
    Tensor want({1, c}, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < c; ++k) want[k] += w.at(i, k);
    CHECK(max_abs_diff(t.grad(vr), want) <= 1e-12);
    CHECK(t.grad(vr).shape() == row.shape());
  }
}

TEST_CASE("gradient checker basics") {
  const ScalarFunction total = [](Tape&, const Var& x) { return sum_all(x); };
  const auto r1 = check_gradients(total, Tensor::vector({0.3, -1.2, 2.0}));
  CHECK(r1.passed);
  CHECK(r1.analytic[0] == Tensor({3}, 1.0));
  CHECK(r1.max_rel_error <= 1e-9);

  const ScalarFunction squares = [](Tape&, const Var& x) { return sum_all(square(x)); };
  const auto r2 = check_gradients(squares, Tensor::vector({1, 2}));
  CHECK(r2.analytic[0] == Tensor::vector({2, 4}));
  CHECK(std::abs(r2.numeric[0][0] - 2.0) <= 1e-8);
  CHECK(std::abs(r2.numeric[0][1] - 4.0) <= 1e-8);
}

TEST_CASE("gradient checker flags a wrong backward") {
  // y = x^2 recorded with a deliberately wrong derivative of 3x.
  const ScalarFunction wrong = [](Tape& tape, const Var& x) {
    Tensor y = x.value();
    for (double& v : y.data()) v = v * v;
    Var out = tape.record(y, {x.id()}, [](const Tape& tp, const Tensor& g) {
      Tensor d = tp.value(0);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = 3.0 * d[i] * g[i];
      return std::vector<Tensor>{d};
    });
    return sum_all(out);
  };
  CHECK_FALSE(check_gradients(wrong, Tensor::vector({1.0, -0.5})).passed);
}

TEST_CASE("every differentiable op passes finite differences on inputs in [-2, 2]") {
  Rng rng(3);
  const Tensor w = randn({3, 4}, rng);
  struct Case {
    const char* name;
    ScalarFunction f;
    bool positive;
  };
  const std::vector<Case> cases = {
      {"add", [&](Tape& t, const Var& x) { return sum_all((x + x * 0.5) * t.constant(w)); }, false},
      {"sub", [&](Tape& t, const Var& x) { return sum_all((x - t.constant(w)) * t.constant(w)); }, false},
      {"mul", [&](Tape&, const Var& x) { return sum_all(x * x * x); }, false},
      {"div", [&](Tape& t, const Var& x) { return sum_all(t.constant(w) / x); }, true},
      {"sigmoid", [&](Tape& t, const Var& x) { return sum_all(sigmoid(x) * t.constant(w)); }, false},
      {"leaky_relu", [&](Tape& t, const Var& x) { return sum_all(leaky_relu(x, 0.1) * t.constant(w)); }, false},
      {"exp", [&](Tape& t, const Var& x) { return sum_all(exp(x) * t.constant(w)); }, false},
      {"log", [&](Tape& t, const Var& x) { return sum_all(log(x) * t.constant(w)); }, true},
      {"sqrt", [&](Tape& t, const Var& x) { return sum_all(sqrt(x) * t.constant(w)); }, true},
      {"mean", [&](Tape&, const Var& x) { return sum_all(square(mean(x, {1}))); }, false},
      {"var", [&](Tape&, const Var& x) { return sum_all(var(x, {0}, true)); }, false},
      {"matmul", [&](Tape& t, const Var& x) { return sum_all(square(matmul(x, transpose(t.constant(w))))); }, false},
      {"reshape/swap", [&](Tape& t, const Var& x) {
         return sum_all(swap_last_axes(reshape(x, {1, 3, 4})) * t.constant(transpose(w).reshaped({1, 4, 3})));
       }, false},
      {"index/concat", [&](Tape&, const Var& x) {
         const std::size_t rows[] = {2, 0, 2};
         const Var parts[] = {index_rows(x, rows), x};
         return sum_all(square(concat_rows(parts)));
       }, false},
      {"log_softmax", [&](Tape& t, const Var& x) { return sum_all(log_softmax(x) * t.constant(w)); }, false},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    Tensor x = c.positive ? uniform({3, 4}, rng, 0.5, 2.0) : uniform({3, 4}, rng, -2.0, 2.0);
    // Keep leaky_relu away from its kink.
    for (double& v : x.data())
      if (std::abs(v) < 0.05) v += 0.1;
    const auto r = check_gradients(c.f, x);
    CHECK(r.passed);
  }
}

TEST_CASE("parameter gradient checker sees bound tensors") {
  Rng rng(4);
  Tensor a = randn({2, 3}, rng), b = randn({3, 2}, rng);
  const auto r = check_parameter_gradients([&](Binder& bind) { return sum_all(square(matmul(bind(a), bind(b)))); }, {&a, &b});
  CHECK(r.passed);
  CHECK(r.analytic.size() == 2);
}

TEST_CASE("binder returns zeros for unbound tensors and one leaf per tensor") {
  Tape t;
  Binder bind(t);
  Tensor p = Tensor::vector({1, 2}), q = Tensor::vector({3, 4});
  Var v1 = bind(p), v2 = bind(p);
  CHECK(v1.id() == v2.id());
  t.backward(sum_all(v1 * v2));
  CHECK(bind.grad(p) == Tensor::vector({2, 4}));  // d(p*p)/dp
  CHECK(bind.grad(q) == Tensor({2}, 0.0));
}

TEST_CASE("tensor binary format round trip") {
  Rng rng(5);
  const Tensor t = randn({2, 3, 4}, rng);
  std::stringstream buf;
  write_tensor(buf, t);
  const std::string bytes = buf.str();
  CHECK(bytes.substr(0, 4) == "DMX1");
  CHECK(bytes.size() == 4 + 4 + 3 * 8 + 24 * 8);
  CHECK(bitwise_equal(read_tensor(buf), t));

  std::stringstream bad("XXXX");
  CHECK_THROWS_AS(read_tensor(bad), IoError);
}

TEST_CASE("csv fixtures parse into matrices") {
  const Tensor t = parse_csv_tensor("# header comment\n1,2,3\n\n4,5,6\n");
  CHECK(t == Tensor::matrix({{1, 2, 3}, {4, 5, 6}}));
  CHECK(parse_csv_tensor("7,8").shape() == Shape{1, 2});
}

TEST_CASE("archive keeps tensors and metadata") {
  const auto dir = std::filesystem::temp_directory_path() / "damix_test_archive";
  std::filesystem::remove_all(dir);
  TensorArchive ar;
  ar.put("a.b", Tensor::vector({1, -0.0, 3.5}));
  ar.set_meta("kind", "rdsbn");
  ar.save(dir);
  const TensorArchive back = TensorArchive::load(dir);
  CHECK(bitwise_equal(back.get("a.b"), ar.get("a.b")));
  CHECK(back.meta("kind") == "rdsbn");
  CHECK_THROWS_AS(back.get("missing"), LookupError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("rng streams are reproducible") {
  Rng a(42), b(42), c(43);
  bool same = true, differs = false;
  for (int i = 0; i < 100; ++i) {
    const double x = a.normal(), y = b.normal(), z = c.normal();
    same = same && x == y;
    differs = differs || x != z;
  }
  CHECK(same);
  CHECK(differs);
  CHECK(mix_seed(1, 2) != mix_seed(2, 1));
}
