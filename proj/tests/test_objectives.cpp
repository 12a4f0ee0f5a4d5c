#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "damix/errors.hpp"
#include "damix/objectives.hpp"
#include "damix/verify/oracles.hpp"
#include "support.hpp"

using namespace damix;
using namespace damix::obj;
using damix::test::randn;

namespace {

double id_value(const Tensor& logits, std::span<const int> labels, std::span<const bool> mask = {}) {
  Tape t;
  return id_loss(t.constant(logits), labels, mask).value().item();
}

double triplet_value(const Tensor& f, std::span<const int> labels, double margin) {
  Tape t;
  return triplet_loss(t.constant(f), labels, margin).value().item();
}

}  // namespace

TEST_CASE("id loss on uniform logits is ln K") {
  const std::vector<int> labels{0, 3, 2};
  CHECK(std::abs(id_value(Tensor({3, 5}, 0.7), labels) - std::log(5.0)) <= 1e-12);
}

TEST_CASE("id loss vanishes on saturated logits") {
  const Tensor logits = Tensor::matrix({{30, 0, 0}, {0, 0, 30}});
  const std::vector<int> labels{0, 2};
  CHECK(id_value(logits, labels) < 1e-6);
}

TEST_CASE("id loss worked example") {
  const Tensor logits = Tensor::matrix({{1, 2, 3}});
  const std::vector<int> labels{2};
  // -log(e^3 / (e + e^2 + e^3))
  CHECK(std::abs(id_value(logits, labels) - 0.40760596444438) <= 1e-12);
  CHECK(std::abs(oracle::cross_entropy(logits, labels) - 0.40760596444438) <= 1e-12);
}

TEST_CASE("id loss matches the oracle and honors the mask") {
  Rng rng(40);
  const Tensor logits = randn({6, 4}, rng, 3.0);
  const std::vector<int> labels{0, 3, 1, 2, 2, 0};
  CHECK(std::abs(id_value(logits, labels) - oracle::cross_entropy(logits, labels)) <= 1e-12);

  const bool mask[6] = {false, true, false, false, true, false};
  const std::vector<int> kept{0, -1, 1, 2, -1, 0};
  CHECK(std::abs(id_value(logits, labels, mask) - oracle::cross_entropy(logits, kept)) <= 1e-12);

  const bool all[6] = {true, true, true, true, true, true};
  CHECK_THROWS_AS(id_value(logits, labels, all), NumericError);
}

TEST_CASE("triplet loss examples") {
  const std::vector<int> labels{0, 0, 1, 1};
  CHECK(std::abs(triplet_value(Tensor({4, 3}, 0.4), labels, 0.3) - 0.3) <= 1e-6);
  const Tensor sep = Tensor::matrix({{0, 0}, {0.1, 0}, {10, 0}, {10.1, 0}});
  CHECK(triplet_value(sep, labels, 0.3) == 0.0);
}

TEST_CASE("triplet loss matches the exhaustive oracle") {
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor f = randn({8, 5}, rng);
    const std::vector<int> labels{0, 1, 2, 3, 0, 1, 2, 3};
    CHECK(std::abs(triplet_value(f, labels, 0.5) - oracle::triplet(f, labels, 0.5)) <= 1e-10);
  }
}

TEST_CASE("triplet loss is translation invariant") {
  Rng rng(42);
  const Tensor f = randn({6, 3}, rng);
  const Tensor shift = randn({1, 3}, rng, 5.0);
  Tensor g = f;
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t k = 0; k < 3; ++k) g.at(i, k) += shift.at(0, k);
  const std::vector<int> labels{0, 0, 1, 1, 2, 2};
  CHECK(std::abs(triplet_value(f, labels, 0.3) - triplet_value(g, labels, 0.3)) <= 1e-10);
}

TEST_CASE("triplet loss needs a positive and a negative per anchor") {
  const std::vector<int> lonely{0, 0, 1};
  CHECK_THROWS_AS(triplet_value(Tensor({3, 2}, 1.0), lonely, 0.3), SamplerContractError);
  const std::vector<int> one_class{2, 2, 2};
  CHECK_THROWS_AS(triplet_value(Tensor({3, 2}, 1.0), one_class, 0.3), SamplerContractError);
}

TEST_CASE("stage composition") {
  Tape t;
  LossParts p;
  p.id = t.constant(Tensor::scalar(0.5));
  p.triplet = t.constant(Tensor::scalar(0.4));
  CHECK(std::abs(stage_loss(Stage::pretrain, p).total - 0.9) <= 1e-15);

  p.id_mdif = t.constant(Tensor::scalar(0.5));
  const LossBundle b = stage_loss(Stage::adapt, p);
  CHECK(std::abs(b.total - 1.4) <= 1e-15);
  CHECK(b.id_mdif_loss == 0.5);
  CHECK_THROWS_AS(stage_loss(Stage::pretrain, p), CompositionError);

  LossParts missing;
  missing.id = t.constant(Tensor::scalar(0.5));
  missing.triplet = t.constant(Tensor::scalar(0.4));
  CHECK_THROWS_AS(stage_loss(Stage::adapt, missing), CompositionError);
}

TEST_CASE("label space keeps domains disjoint") {
  LabelSpace s;
  s.set_domain(2, 4);
  s.set_domain(0, 3);
  CHECK(s.offset(0) == 0);
  CHECK(s.offset(2) == 3);
  CHECK(s.total() == 7);
  CHECK(s.global(2, 1) == 4);
  CHECK(s.global(0, -1) == -1);
  s.set_domain(0, 5);
  CHECK(s.global(2, 0) == 5);
  std::vector<int> seen;
  for (int d : {0, 2})
    for (std::size_t i = 0; i < s.num_ids(d); ++i) seen.push_back(s.global(d, static_cast<int>(i)));
  std::sort(seen.begin(), seen.end());
  CHECK(std::adjacent_find(seen.begin(), seen.end()) == seen.end());
  CHECK(seen.back() == static_cast<int>(s.total()) - 1);
}
