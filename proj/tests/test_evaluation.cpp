#include <doctest.h>

#include <cmath>
#include <vector>

#include "damix/errors.hpp"
#include "damix/evaluation.hpp"
#include "damix/verify/oracles.hpp"
#include "support.hpp"

using namespace damix;
using namespace damix::eval;
using damix::test::randn;

namespace {

Tensor scaled(const Tensor& x, double c) {
  Tensor y = x;
  for (double& v : y.data()) v *= c;
  return y;
}

/// Random orthogonal matrix via Gram-Schmidt.
Tensor orthogonal(std::size_t n, Rng& rng) {
  Tensor q = randn({n, n}, rng);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double d = 0;
      for (std::size_t k = 0; k < n; ++k) d += q.at(i, k) * q.at(j, k);
      for (std::size_t k = 0; k < n; ++k) q.at(i, k) -= d * q.at(j, k);
    }
    double norm = 0;
    for (std::size_t k = 0; k < n; ++k) norm += q.at(i, k) * q.at(i, k);
    for (std::size_t k = 0; k < n; ++k) q.at(i, k) /= std::sqrt(norm);
  }
  return q;
}

}  // namespace

TEST_CASE("perfect ranking") {
  const Tensor g = Tensor::matrix({{0, 0}, {5, 0}, {0, 5}});
  const Tensor q = Tensor::matrix({{0.1, 0}, {5, 0.1}, {0, 4.9}});
  const std::vector<int> ids{0, 1, 2};
  const auto r = evaluate_retrieval(q, ids, g, ids);
  CHECK(r.mean_ap == 1.0);
  CHECK(r.rank(1) == 1.0);
  CHECK(r.cmc.size() == 3);
  CHECK(r.rank(10) == 1.0);
}

TEST_CASE("average precision worked example") {
  // The single positive is ranked second: AP = 1/2.
  const Tensor g = Tensor::matrix({{0}, {1}, {3}});
  const Tensor q = Tensor::matrix({{0}});
  const std::vector<int> qid{7}, gid{2, 7, 3};
  const auto r = evaluate_retrieval(q, qid, g, gid);
  CHECK(r.mean_ap == 0.5);
  CHECK(r.rank(1) == 0.0);
  CHECK(r.rank(2) == 1.0);

  // Positives at ranks 1 and 3: (1/1 + 2/3) / 2.
  const std::vector<int> gid2{7, 3, 7};
  CHECK(std::abs(evaluate_retrieval(q, qid, g, gid2).mean_ap - 5.0 / 6.0) <= 1e-15);
}

TEST_CASE("retrieval matches the brute-force oracle") {
  Rng rng(50);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor q = randn({6, 4}, rng), g = randn({15, 4}, rng);
    std::vector<int> qid, gid;
    for (int i = 0; i < 6; ++i) qid.push_back(i % 3);
    for (int i = 0; i < 15; ++i) gid.push_back(static_cast<int>(rng.index(4)));
    for (int i = 0; i < 3; ++i) gid[static_cast<std::size_t>(i)] = i;
    const auto got = evaluate_retrieval(q, qid, g, gid), want = oracle::retrieval(q, qid, g, gid);
    CHECK(std::abs(got.mean_ap - want.mean_ap) <= 1e-12);
    CHECK(got.cmc == want.cmc);
  }
}

TEST_CASE("retrieval is invariant to rotations and gallery order") {
  Rng rng(51);
  const Tensor q = randn({5, 4}, rng), g = randn({12, 4}, rng);
  const std::vector<int> qid{0, 1, 2, 3, 0};
  const std::vector<int> gid{0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3};
  const auto base = evaluate_retrieval(q, qid, g, gid);

  const Tensor rot = orthogonal(4, rng);
  const auto r = evaluate_retrieval(matmul(q, rot), qid, matmul(g, rot), gid);
  CHECK(std::abs(r.mean_ap - base.mean_ap) <= 1e-12);
  CHECK(r.cmc == base.cmc);

  Tensor gp({12, 4});
  std::vector<int> gidp;
  for (std::size_t i = 0; i < 12; ++i) {
    const std::size_t src = (i * 5) % 12;
    for (std::size_t k = 0; k < 4; ++k) gp.at(i, k) = g.at(src, k);
    gidp.push_back(gid[src]);
  }
  const auto p = evaluate_retrieval(q, qid, gp, gidp);
  CHECK(std::abs(p.mean_ap - base.mean_ap) <= 1e-12);
  CHECK(p.cmc == base.cmc);
}

TEST_CASE("retrieval rejects a query identity missing from the gallery") {
  const Tensor g = Tensor::matrix({{0}, {1}});
  const std::vector<int> qid{9}, gid{0, 1};
  CHECK_THROWS_AS(evaluate_retrieval(Tensor::matrix({{0}}), qid, g, gid), EvaluationError);
}

TEST_CASE("domain distance matrix") {
  const Tensor f = Tensor::matrix({{1, 0}, {1, 0}, {0, 1}, {0, 1}});
  const std::vector<int> dom{0, 0, 1, 1};
  const auto d = domain_distance_matrix(f, dom);
  CHECK(d.domains == std::vector<int>{0, 1});
  CHECK(d.distance.at(0, 0) == 0.0);
  CHECK(std::abs(d.distance.at(0, 1) - std::sqrt(2.0)) <= 1e-15);
  CHECK(d.distance.at(0, 1) == d.distance.at(1, 0));

  const std::vector<int> same{0, 0, 0, 0};
  const Tensor rep = Tensor::matrix({{2, 3}, {2, 3}, {2, 3}, {2, 3}});
  const auto z = domain_distance_matrix(rep, same);
  CHECK(z.distance.at(0, 0) == 0.0);
}

TEST_CASE("interclass distance examples") {
  const Tensor two = Tensor::matrix({{0, 0}, {3, 0}});
  const std::vector<int> l2{0, 1};
  CHECK(interclass_distance(two, l2) == 3.0);

  const double h = std::sqrt(3.0) / 2.0;
  const Tensor tri = Tensor::matrix({{0, 0}, {1, 0}, {0.5, h}});
  const std::vector<int> l3{0, 1, 2};
  CHECK(std::abs(interclass_distance(tri, l3) - 1.0) <= 1e-15);
}

TEST_CASE("intraclass variance example") {
  const Tensor f = Tensor::matrix({{0}, {2}, {5}, {5}});
  const std::vector<int> l{0, 0, 1, 1};
  // Identity 0 sums to 2, identity 1 to 0; mean 1.
  CHECK(intraclass_variance(f, l) == 1.0);
  const std::vector<int> one{0, 0, 1};
  CHECK(intraclass_variance(Tensor::matrix({{0}, {2}, {9}}), one) == 1.0);
  CHECK(intraclass_variance(Tensor::matrix({{0}, {2}}), std::vector<int>{0, 0}) == 2.0);
  CHECK(intraclass_variance(Tensor::matrix({{0}, {2}}), std::vector<int>{0, 0}, true) == 1.0);
}

TEST_CASE("diagnostics match the oracle and scale as expected") {
  Rng rng(52);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor f = randn({20, 5}, rng);
    std::vector<int> l;
    for (int i = 0; i < 20; ++i) l.push_back(i % 4);
    const double inter = interclass_distance(f, l), intra = intraclass_variance(f, l);
    CHECK(std::abs(inter - oracle::interclass_distance(f, l)) <= 1e-12);
    CHECK(std::abs(intra - oracle::intraclass_variance(f, l, false)) <= 1e-12);
    CHECK(std::abs(intraclass_variance(f, l, true) - oracle::intraclass_variance(f, l, true)) <= 1e-12);
    CHECK(std::abs(interclass_distance(scaled(f, 3.0), l) - 3.0 * inter) <= 1e-12);
    CHECK(std::abs(intraclass_variance(scaled(f, 3.0), l) - 9.0 * intra) <= 1e-10);
  }
}

TEST_CASE("domain gap report has per-domain and pooled values") {
  Rng rng(53);
  const Tensor f = randn({12, 3}, rng);
  const std::vector<int> dom{0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1};
  const std::vector<int> ids{0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5};
  const auto r = domain_gap_report(f, dom, ids);
  CHECK(r.interclass.size() == 2);
  CHECK(std::abs(r.interclass_combined - interclass_distance(f, ids)) <= 1e-12);
  CHECK(std::abs(r.intraclass_combined - intraclass_variance(f, ids)) <= 1e-12);
}
