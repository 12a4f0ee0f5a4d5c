#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "damix/errors.hpp"
#include "damix/normalization.hpp"
#include "damix/numerics/gradcheck.hpp"
#include "support.hpp"

using namespace damix;
using namespace damix::norm;
using damix::test::randn;
using damix::test::sigmoid;

namespace {

Tensor run_bn(const Tensor& x, const BnParams& p, RunningStats& st, Mode mode) {
  Tape t;
  Binder b(t, false);
  return bn_forward(b, t.constant(x), p, st, mode).value();
}

Tensor run_rdsbn(const Tensor& x, std::span<const int> ids, RdsbnState& st, Mode mode, bool rectify = true) {
  Tape t;
  Binder b(t, false);
  return rdsbn_forward(b, t.constant(x), ids, st, mode, rectify).value();
}

/// Plain-loop standardize + affine of one branch.
Tensor bn_oracle(const Tensor& x, const DomainBranch& br, Mode mode) {
  const std::size_t n = x.extent(0), c = x.extent(1), l = x.extent(2);
  Tensor out({n, c, l});
  for (std::size_t k = 0; k < c; ++k) {
    double mu = br.stats.mean[k], var = br.stats.var[k];
    if (mode == Mode::train) {
      mu = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < l; ++j) mu += x.at(i, k, j);
      mu /= double(n * l);
      var = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < l; ++j) var += (x.at(i, k, j) - mu) * (x.at(i, k, j) - mu);
      var /= double(n * l);
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < l; ++j)
        out.at(i, k, j) = br.bn.gamma[k] * (x.at(i, k, j) - mu) / std::sqrt(var + br.bn.eps) + br.bn.beta[k];
  }
  return out;
}

/// sigmoid(1_M (r [mu; sigma])) with scalar loops.
std::vector<double> gate_oracle(const Tensor& x, std::size_t n, const Tensor& r, double eps) {
  const std::size_t c = x.extent(1), l = x.extent(2), m = r.extent(0);
  std::vector<double> a(c);
  for (std::size_t k = 0; k < c; ++k) {
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < l; ++j) mu += x.at(n, k, j);
    mu /= double(l);
    for (std::size_t j = 0; j < l; ++j) var += (x.at(n, k, j) - mu) * (x.at(n, k, j) - mu);
    const double sigma = std::sqrt(var / double(l) + eps);
    double s = 0.0;
    for (std::size_t row = 0; row < m; ++row) s += r.at(row, 0) * mu + r.at(row, 1) * sigma;
    a[k] = sigmoid(s);
  }
  return a;
}

Tensor rows_of(const Tensor& x, const std::vector<std::size_t>& rows) {
  const std::size_t per = x.size() / x.extent(0);
  Shape s = x.shape();
  s[0] = rows.size();
  Tensor out(s);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x.data().begin() + std::ptrdiff_t(rows[i] * per), per, out.data().begin() + std::ptrdiff_t(i * per));
  return out;
}

}  // namespace

TEST_CASE("bn_forward on a constant channel returns beta") {
  Tensor x({3, 1, 2}, 4.0);
  BnParams p = BnParams::init(1);
  p.beta = Tensor::vector({0.7});
  RunningStats st = RunningStats::init(1);
  const Tensor y = run_bn(x, p, st, Mode::train);
  for (double v : y.data()) CHECK(v == doctest::Approx(0.7).epsilon(1e-3));
}

TEST_CASE("bn_forward on {1, 3} with gamma 2, beta 1") {
  const Tensor x({2, 1, 1}, std::vector<double>{1.0, 3.0});
  BnParams p = BnParams::init(1, 1e-12);
  p.gamma = Tensor::vector({2.0});
  p.beta = Tensor::vector({1.0});
  RunningStats st = RunningStats::init(1);
  const Tensor y = run_bn(x, p, st, Mode::train);
  CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(y[1] == doctest::Approx(3.0).epsilon(1e-9));
}

TEST_CASE("bn_forward output moments on a random batch") {
  Rng rng(10);
  const Tensor x = randn({4, 3, 2}, rng, 2.0, 1.0);
  BnParams p = BnParams::init(3);
  RunningStats st = RunningStats::init(3);
  const Tensor y = run_bn(x, p, st, Mode::train);
  for (std::size_t k = 0; k < 3; ++k) {
    double xm = 0, ym = 0;
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 2; ++j) xm += x.at(i, k, j) / 8.0, ym += y.at(i, k, j) / 8.0;
    double xv = 0, yv = 0;
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        xv += (x.at(i, k, j) - xm) * (x.at(i, k, j) - xm) / 8.0;
        yv += (y.at(i, k, j) - ym) * (y.at(i, k, j) - ym) / 8.0;
      }
    CHECK(std::abs(ym) <= 1e-12);
    CHECK(std::abs(yv - 1.0 / (1.0 + p.eps / xv)) <= 1e-6);
  }
}

TEST_CASE("bn_forward matches the loop oracle in both modes") {
  Rng rng(11);
  DomainBranch br{BnParams::init(3), RunningStats::init(3), Tensor({1, 2}, 0.0)};
  br.bn.gamma = randn({3}, rng, 0.5, 1.0);
  br.bn.beta = randn({3}, rng);
  br.stats.mean = randn({3}, rng);
  br.stats.var = randn({3}, rng, 0.1, 1.0);
  const Tensor x = randn({5, 3, 4}, rng);
  RunningStats st = br.stats;
  CHECK(max_abs_diff(run_bn(x, br.bn, st, Mode::eval), bn_oracle(x, br, Mode::eval)) <= 1e-12);
  CHECK(max_abs_diff(run_bn(x, br.bn, st, Mode::train), bn_oracle(x, br, Mode::train)) <= 1e-12);
}

TEST_CASE("bn_forward errors") {
  BnParams p = BnParams::init(3);
  RunningStats st = RunningStats::init(3);
  CHECK_THROWS_AS(run_bn(Tensor({2, 4, 2}, 1.0), p, st, Mode::train), DimensionError);
  CHECK_THROWS_AS(run_bn(Tensor({1, 3, 1}, 1.0), p, st, Mode::train), DegenerateBatchError);
  p.momentum = 1.5;
  CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("running statistics updates") {
  const Tensor mu = Tensor::vector({2.0, -1.0}), var = Tensor::vector({0.5, 3.0});
  RunningStats st{Tensor::vector({7, 7}), Tensor::vector({9, 9}), 4};
  const RunningStats full = update_running_stats(st, mu, var, 1.0);
  CHECK(full.mean == mu);
  CHECK(full.var == var);
  CHECK(full.step == 5);
  const RunningStats none = update_running_stats(st, mu, var, 0.0);
  CHECK(none.mean == st.mean);
  CHECK(none.var == st.var);
  CHECK_THROWS_AS(update_running_stats(st, mu, var, -0.1), ConfigError);

  // Unrolled: 5 * (1 - 0.9^3).
  RunningStats s = RunningStats::init(1);
  for (int t = 0; t < 3; ++t) s = update_running_stats(s, Tensor::vector({5.0}), Tensor::vector({1.0}), 0.1);
  CHECK(s.mean[0] == doctest::Approx(1.355).epsilon(1e-12));
}

TEST_CASE("rectifier gate values") {
  Tape t;
  const Tensor x = Tensor::matrix({{-1, 1}, {0, 2}, {-2, 0}});  // channel means 0, 1, -1
  const Tensor a0 = rectifier_weights(t.constant(x), t.constant(Tensor({1, 2}, 0.0))).value();
  for (double v : a0.data()) CHECK(v == 0.5);
  const Tensor a1 = rectifier_weights(t.constant(x), t.constant(Tensor::matrix({{1, 0}}))).value();
  CHECK(a1[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(a1[1] == doctest::Approx(0.7310585786).epsilon(1e-10));
  CHECK(a1[2] == doctest::Approx(0.2689414214).epsilon(1e-10));
}

TEST_CASE("rectifier gate matches the scalar chain and stays inside (0, 1)") {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t c = 1 + rng.index(5), l = 1 + rng.index(6), m = 1 + rng.index(3);
    const Tensor x = randn({1, c, l}, rng, 3.0);
    const Tensor r = randn({m, 2}, rng);
    Tape t;
    const Tensor a = rectifier_weights(t.constant(x.reshaped({c, l})), t.constant(r)).value();
    const auto want = gate_oracle(x, 0, r, 1e-5);
    for (std::size_t k = 0; k < c; ++k) {
      CHECK(std::abs(a[k] - want[k]) <= 1e-12);
      CHECK(a[k] > 0.0);
      CHECK(a[k] < 1.0);
    }
  }
}

TEST_CASE("rdsbn with zero rectifiers is half of dsbn") {
  Rng rng(13);
  RdsbnState st(3);
  for (int d : {0, 1}) {
    st.add_domain(d).bn.gamma = randn({3}, rng, 0.3, 1.0);
    st.branch(d).bn.beta = randn({3}, rng);
  }
  const std::vector<int> ids{1, 0, 0, 1, 1};
  const Tensor x = randn({5, 3, 4}, rng);
  RdsbnState a = st, b = st;
  const Tensor yr = run_rdsbn(x, ids, a, Mode::train, true), yd = run_rdsbn(x, ids, b, Mode::train, false);
  for (std::size_t i = 0; i < yr.size(); ++i) CHECK(yr[i] == 0.5 * yd[i]);
}

TEST_CASE("per-domain standardization removes a domain shift") {
  Rng rng(14);
  RdsbnState st(2);
  st.add_domain(0);
  st.add_domain(1);
  const Tensor base = randn({3, 2, 4}, rng);
  Tensor x({6, 2, 4});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t j = 0; j < 4; ++j) {
        x.at(i, k, j) = base.at(i, k, j);
        x.at(i + 3, k, j) = base.at(i, k, j) + (k == 0 ? 5.0 : -2.0);
      }
  const std::vector<int> ids{0, 0, 0, 1, 1, 1};
  const Tensor y = run_rdsbn(x, ids, st, Mode::train, false);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(y.at(i, k, j) - y.at(i + 3, k, j)) <= 1e-12);
}

TEST_CASE("rdsbn equals split, per-branch bn, then gate") {
  Rng rng(15);
  for (Mode mode : {Mode::train, Mode::eval}) {
    RdsbnState st(3, 2);
    for (int d : {0, 1, 2}) {
      auto& br = st.add_domain(d);
      br.bn.gamma = randn({3}, rng, 0.3, 1.0);
      br.bn.beta = randn({3}, rng);
      br.rectifier = randn({2, 2}, rng, 0.5);
      br.stats.mean = randn({3}, rng);
      br.stats.var = randn({3}, rng, 0.1, 1.0);
    }
    const std::vector<int> ids{2, 0, 1, 1, 0, 2, 2};
    const Tensor x = randn({7, 3, 5}, rng, 2.0);
    RdsbnState work = st;
    const Tensor y = run_rdsbn(x, ids, work, mode);
    for (int d : {0, 1, 2}) {
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] == d) rows.push_back(i);
      const Tensor part = rows_of(x, rows);
      const Tensor want = bn_oracle(part, st.branch(d), mode);
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto a = gate_oracle(part, r, st.branch(d).rectifier, st.eps());
        for (std::size_t k = 0; k < 3; ++k)
          for (std::size_t j = 0; j < 5; ++j) CHECK(std::abs(y.at(rows[r], k, j) - a[k] * want.at(r, k, j)) <= 1e-12);
      }
    }
  }
}

TEST_CASE("rdsbn is equivariant to sample permutation") {
  Rng rng(16);
  RdsbnState st(2);
  for (int d : {0, 1}) st.add_domain(d).rectifier = randn({1, 2}, rng);
  const std::vector<int> ids{0, 1, 0, 1, 0, 1};
  const Tensor x = randn({6, 2, 3}, rng);
  std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  std::vector<int> pids;
  for (std::size_t p : perm) pids.push_back(ids[p]);
  RdsbnState a = st, b = st;
  const Tensor y = run_rdsbn(x, ids, a, Mode::train);
  const Tensor yp = run_rdsbn(rows_of(x, perm), pids, b, Mode::train);
  CHECK(max_abs_diff(yp, rows_of(y, perm)) <= 1e-12);
}

TEST_CASE("rdsbn errors") {
  RdsbnState st(2);
  st.add_domain(0);
  st.add_domain(1);
  const std::vector<int> unknown{0, 0, 7};
  CHECK_THROWS_AS(run_rdsbn(Tensor({3, 2, 2}, 1.0), unknown, st, Mode::train), LookupError);
  const std::vector<int> single{0, 0, 1};
  CHECK_THROWS_AS(run_rdsbn(Tensor({3, 2, 2}, 1.0), single, st, Mode::train), DegenerateBatchError);
  CHECK_NOTHROW(run_rdsbn(Tensor({3, 2, 2}, 1.0), single, st, Mode::eval));
}

TEST_CASE("eval branch selection ignores tags") {
  Rng rng(17);
  RdsbnState st(3);
  for (int d : {0, 1, 2}) {
    auto& br = st.add_domain(d);
    br.bn.gamma = randn({3}, rng, 0.3, 1.0);
    br.stats.mean = randn({3}, rng);
    br.rectifier = randn({1, 2}, rng);
  }
  const Tensor x = randn({4, 3, 3}, rng);
  Tape t;
  Binder b(t, false);
  const Tensor y2 = eval_branch_select(st, 2).apply(b, t.constant(x)).value();
  const Tensor y0 = eval_branch_select(st, 0).apply(b, t.constant(x)).value();
  CHECK(max_abs_diff(y2, y0) > 1e-3);
  const Tensor want = bn_oracle(x, st.branch(2), Mode::eval);
  for (std::size_t n = 0; n < 4; ++n) {
    const auto a = gate_oracle(x, n, st.branch(2).rectifier, st.eps());
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(y2.at(n, k, j) - a[k] * want.at(n, k, j)) <= 1e-12);
  }
  CHECK_THROWS_AS(eval_branch_select(st, 9), LookupError);
}

TEST_CASE("rdsbn gradients wrt x, gamma, beta, r") {
  Rng rng(18);
  Tensor x = randn({6, 2, 4}, rng);
  RdsbnState st(2, 2);
  std::vector<Tensor*> params{&x};
  for (int d : {0, 1}) {
    auto& br = st.add_domain(d);
    br.bn.gamma = randn({2}, rng, 0.3, 1.0);
    br.bn.beta = randn({2}, rng, 0.3);
    br.rectifier = randn({2, 2}, rng, 0.5);
  }
  for (int d : {0, 1}) {
    params.push_back(&st.branch(d).bn.gamma);
    params.push_back(&st.branch(d).bn.beta);
    params.push_back(&st.branch(d).rectifier);
  }
  const std::vector<int> ids{0, 0, 1, 1, 0, 1};
  const Tensor w = randn({6, 2, 4}, rng);
  const auto r = check_parameter_gradients(
      [&](Binder& b) { return sum_all(rdsbn_forward(b, b(x), ids, st, Mode::train) * b.tape().constant(w)); }, params);
  CHECK(r.passed);
}

TEST_CASE("norm layer kinds and state persistence") {
  Rng rng(19);
  NormLayer bn(NormKind::bn, 2, 1, 1e-5, 0.1);
  bn.add_domain(3);
  CHECK(bn.branch_for(3) == 0);
  NormLayer ds(NormKind::rdsbn, 2, 1, 1e-5, 0.1);
  ds.add_domain(3);
  CHECK(ds.branch_for(3) == 3);
  CHECK(parse_norm_kind("dsbn") == NormKind::dsbn);
  CHECK_THROWS_AS(parse_norm_kind("ibn"), ConfigError);

  ds.state().branch(3).rectifier = randn({1, 2}, rng);
  ds.state().branch(3).stats.mean = randn({2}, rng);
  ds.state().branch(3).stats.step = 12;
  TensorArchive ar;
  ds.state().save(ar, "n");
  const RdsbnState back = RdsbnState::load(ar, "n");
  CHECK(bitwise_equal(back.branch(3).rectifier, ds.state().branch(3).rectifier));
  CHECK(bitwise_equal(back.branch(3).stats.mean, ds.state().branch(3).stats.mean));
  CHECK(back.branch(3).stats.step == 12);
}
