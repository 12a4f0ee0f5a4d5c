#include <doctest.h>

#include <cmath>
#include <vector>

#include "damix/errors.hpp"
#include "damix/graph_fusion.hpp"
#include "damix/numerics/gradcheck.hpp"
#include "damix/verify/oracles.hpp"
#include "support.hpp"

using namespace damix;
using namespace damix::graph;
using damix::test::randn;

namespace {

Tensor agent_of(const Tensor& f, const Tensor& w, const Tensor& b) {
  Tape t;
  return compute_agent(t.constant(f), t.constant(w), t.constant(b)).value();
}

Tensor fuse(const Tensor& h0, std::span<const int> ids, const MdifParams& p, AgentRegistry& reg, Mode mode) {
  Tape t;
  Binder b(t, false);
  return mdif_forward(b, t.constant(h0), ids, p, reg, mode).value();
}

AgentRegistry registry(std::size_t c, std::size_t domains) {
  AgentRegistry reg(c);
  for (std::size_t d = 0; d < domains; ++d) reg.add_domain(static_cast<int>(d));
  return reg;
}

}  // namespace

TEST_CASE("agent of constant features is that feature") {
  Rng rng(20);
  const Tensor v = randn({1, 3}, rng);
  Tensor f({4, 3});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < 3; ++k) f.at(i, k) = v.at(0, k);
  const Tensor a = agent_of(f, randn({3, 1}, rng, 0.1), Tensor({1, 1}, 1.0));
  for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs(a[k] - v.at(0, k)) <= 1e-12);

  const Tensor one = agent_of(v, randn({3, 1}, rng, 0.1), Tensor({1, 1}, 2.0));
  for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs(one[k] - v.at(0, k)) <= 1e-12);
}

TEST_CASE("agent weights follow the head logits") {
  // f(u) = 1, f(v) = 3 with w = (1, 0), b = 0.
  const Tensor f = Tensor::matrix({{1, 5}, {3, -1}});
  const Tensor a = agent_of(f, Tensor::matrix({{1}, {0}}), Tensor({1, 1}, 0.0));
  CHECK(a[0] == doctest::Approx(0.25 * 1 + 0.75 * 3).epsilon(1e-12));
  CHECK(a[1] == doctest::Approx(0.25 * 5 + 0.75 * -1).epsilon(1e-12));
  CHECK_THROWS_AS(agent_of(Tensor::matrix({{1, 0}, {-1, 0}}), Tensor::matrix({{1}, {0}}), Tensor({1, 1}, 0.0)),
                  NumericError);
}

TEST_CASE("agent moving average") {
  AgentRegistry reg = registry(2, 1);
  reg.entry(0).agent = Tensor::vector({1, 1});
  const Tensor v = Tensor::vector({4, -2});
  AgentRegistry full = reg;
  update_agent(full, 0, v, 1.0);
  CHECK(full.entry(0).agent == v);
  CHECK(full.entry(0).step == 1);
  AgentRegistry none = reg;
  update_agent(none, 0, v, 0.0);
  CHECK(none.entry(0).agent == reg.entry(0).agent);

  // Zero start, two steps at alpha 0.1: v (1 - 0.9^2) = 0.19 v.
  AgentRegistry z = registry(2, 1);
  z.entry(0).agent = Tensor({2}, 0.0);
  update_agent(z, 0, v, 0.1);
  update_agent(z, 0, v, 0.1);
  CHECK(std::abs(z.entry(0).agent[0] - 0.76) <= 1e-12);
  CHECK(std::abs(z.entry(0).agent[1] + 0.38) <= 1e-12);
  CHECK_THROWS_AS(update_agent(z, 0, v, 1.5), ConfigError);
  CHECK_THROWS_AS(update_agent(z, 4, v, 0.5), LookupError);
}

TEST_CASE("adjacency examples") {
  const GraphSpec clique = build_adjacency(3, 0, 1);
  CHECK(clique.num_nodes() == 3);
  for (double v : clique.normalized.data()) CHECK(v == 1.0 / 3.0);

  const GraphSpec l1 = build_adjacency(3, 2, 1);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 9; ++j) CHECK(l1.adjacency.at(i, j) == (i == j ? 1.0 : 0.0));
  for (std::size_t i = 6; i < 9; ++i)
    for (std::size_t j = 6; j < 9; ++j) CHECK(l1.adjacency.at(i, j) == 1.0);

  const GraphSpec l2 = build_adjacency(2, 1, 2);
  // Instance degree 2 (self, agent); agent degree 3 (self, instance, other agent).
  CHECK(std::abs(l2.normalized.at(0, l2.agent_node(0)) - 1.0 / std::sqrt(6.0)) <= 1e-15);
  CHECK(l2.normalized.at(0, l2.agent_node(1)) == 0.0);
  CHECK(std::abs(l2.normalized.at(l2.agent_node(0), l2.agent_node(1)) - 1.0 / 3.0) <= 1e-15);
  CHECK(l2.normalized.at(0, 0) == 0.5);
}

TEST_CASE("adjacency matches the role oracle and is symmetric") {
  for (std::size_t d = 1; d <= 4; ++d)
    for (std::size_t q = 0; q <= 3; ++q)
      for (int layer : {1, 2}) {
        const GraphSpec g = build_adjacency(d, q, layer);
        CHECK(g.adjacency == oracle::adjacency(d, q, layer));
        CHECK(max_abs_diff(g.normalized, oracle::normalize(g.adjacency)) <= 1e-15);
        CHECK(g.normalized == transpose(g.normalized));
      }
}

TEST_CASE("gcn layer") {
  Rng rng(21);
  const GraphSpec g = build_adjacency(2, 0, 1);
  GraphSpec ident = g;
  ident.normalized = Tensor::identity(2);
  const Tensor h = test::uniform({2, 3}, rng, 0.0, 2.0);
  Tape t;
  CHECK(gcn_layer(t.constant(h), ident, t.constant(Tensor::identity(3)), 0.01).value() == h);
  CHECK(gcn_layer(t.constant(h), g, t.constant(Tensor({3, 3}, 0.0)), 0.01).value() == Tensor({2, 3}, 0.0));

  const GraphSpec big = build_adjacency(3, 2, 2);
  const Tensor hx = randn({big.num_nodes(), 4}, rng), w = randn({4, 4}, rng);
  const Tensor got = gcn_layer(t.constant(hx), big, t.constant(w), 0.2).value();
  CHECK(max_abs_diff(got, oracle::gcn_layer(big.normalized, hx, w, 0.2)) <= 1e-12);
}

TEST_CASE("zero fusion weights return the input") {
  Rng rng(22);
  AgentRegistry reg = registry(3, 2);
  const Tensor h0 = randn({4, 3}, rng);
  const std::vector<int> ids{0, 1, 0, 1};
  CHECK(bitwise_equal(fuse(h0, ids, MdifParams::zeros(3), reg, Mode::train), h0));
  CHECK(bitwise_equal(fuse(h0, ids, MdifParams::zeros(3), reg, Mode::eval), h0));
  CHECK(bitwise_equal(fuse(h0, ids, MdifParams::init(3), reg, Mode::train), h0));
}

TEST_CASE("train-mode fusion matches the explicit-matrix oracle") {
  Rng rng(23);
  const std::size_t c = 4;
  AgentRegistry reg = registry(c, 3);
  reg.head_weight = randn({c, 1}, rng, 0.1);
  const MdifParams p{randn({c, c}, rng, 0.5), randn({c, c}, rng, 0.5), 0.01};
  const Tensor h0 = randn({9, c}, rng);
  const std::vector<int> ids{0, 0, 0, 1, 1, 1, 2, 2, 2};
  const Tensor got = fuse(h0, ids, p, reg, Mode::train);
  CHECK(max_abs_diff(got, oracle::mdif_train(h0, 3, p.w1, p.w2, reg.head_weight, 1.0, 0.01)) <= 1e-10);
  CHECK(reg.populated());
}

TEST_CASE("train-mode fusion is equivariant to interleaving") {
  Rng rng(24);
  const std::size_t c = 3;
  AgentRegistry reg = registry(c, 2);
  const MdifParams p{randn({c, c}, rng, 0.5), randn({c, c}, rng, 0.5), 0.01};
  const Tensor h0 = randn({4, c}, rng);
  const std::vector<int> grouped{0, 0, 1, 1}, mixed{0, 1, 0, 1};
  Tensor hm({4, c});
  const std::size_t order[] = {0, 2, 1, 3};
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < c; ++k) hm.at(i, k) = h0.at(order[i], k);
  AgentRegistry r2 = reg;
  const Tensor a = fuse(h0, grouped, p, reg, Mode::train), b = fuse(hm, mixed, p, r2, Mode::train);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < c; ++k) CHECK(std::abs(b.at(i, k) - a.at(order[i], k)) <= 1e-12);
}

TEST_CASE("eval-mode fusion reads agents and treats instances independently") {
  Rng rng(25);
  const std::size_t c = 3;
  AgentRegistry reg = registry(c, 2);
  const MdifParams p{randn({c, c}, rng, 0.5), randn({c, c}, rng, 0.5), 0.01};
  const Tensor h0 = randn({3, c}, rng);
  const std::vector<int> ids{1, 0, 1};
  CHECK_THROWS_AS(fuse(h0, ids, p, reg, Mode::eval), StateError);
  for (int d : {0, 1}) update_agent(reg, d, randn({c}, rng), 1.0);
  const AgentRegistry before = reg;
  const Tensor all = fuse(h0, ids, p, reg, Mode::eval);
  for (std::size_t i = 0; i < 3; ++i) {
    const int tag[1] = {ids[i]};
    CHECK(max_abs_diff(fuse(h0.row(i), tag, p, reg, Mode::eval), all.row(i)) <= 1e-12);
  }
  for (int d : {0, 1}) CHECK(bitwise_equal(reg.entry(d).agent, before.entry(d).agent));
}

TEST_CASE("train-mode fusion rejects unequal domain counts") {
  Rng rng(26);
  AgentRegistry reg = registry(2, 2);
  const std::vector<int> ids{0, 0, 1};
  CHECK_THROWS(fuse(randn({3, 2}, rng), ids, MdifParams::init(2), reg, Mode::train));
}

TEST_CASE("fusion gradients") {
  Rng rng(27);
  const std::size_t c = 3;
  Tensor h0 = randn({4, c}, rng);
  MdifParams p{randn({c, c}, rng, 0.5), randn({c, c}, rng, 0.5), 0.01};
  AgentRegistry reg = registry(c, 2);
  reg.head_weight = randn({c, 1}, rng, 0.1);
  const std::vector<int> ids{1, 0, 0, 1};
  const Tensor w = randn({4, c}, rng);
  const auto r = check_parameter_gradients(
      [&](Binder& b) { return sum_all(mdif_forward(b, b(h0), ids, p, reg, Mode::train) * b.tape().constant(w)); },
      {&h0, &p.w1, &p.w2, &reg.head_weight, &reg.head_bias});
  CHECK(r.passed);
}

TEST_CASE("registry persistence") {
  Rng rng(28);
  AgentRegistry reg = registry(3, 2);
  for (int d : {0, 1}) update_agent(reg, d, randn({3}, rng), 1.0);
  reg.reference_q = 4;
  reg.head_weight = randn({3, 1}, rng);
  TensorArchive ar;
  reg.save(ar, "agents");
  const AgentRegistry back = AgentRegistry::load(ar, "agents");
  CHECK(back.reference_q == 4);
  CHECK(bitwise_equal(back.head_weight, reg.head_weight));
  for (int d : {0, 1}) {
    CHECK(bitwise_equal(back.entry(d).agent, reg.entry(d).agent));
    CHECK(back.entry(d).step == 1);
  }
}
