#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "damix/clustering.hpp"
#include "damix/errors.hpp"
#include "damix/verify/oracles.hpp"
#include "support.hpp"

using namespace damix;
using namespace damix::cluster;
using damix::test::randn;
using damix::test::uniform;

namespace {

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& perm) {
  Tensor out(x.shape());
  const std::size_t c = x.extent(1);
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t k = 0; k < c; ++k) out.at(i, k) = x.at(perm[i], k);
  return out;
}

double rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  std::size_t agree = 0, total = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      const bool sa = a[i] == a[j] && a[i] >= 0, sb = b[i] == b[j] && b[i] >= 0;
      agree += sa == sb;
      ++total;
    }
  return double(agree) / double(total);
}

}  // namespace

TEST_CASE("two separated blobs give two clusters and no noise") {
  const Tensor x = Tensor::matrix({{0, 0}, {0.1, 0}, {0, 0.1}, {0.1, 0.1}, {5, 5}, {5.1, 5}, {5, 5.1}, {5.1, 5.1}});
  const auto a = dbscan(x, 0.2, 3);
  CHECK(a.num_clusters == 2);
  CHECK(a.noise_count() == 0);
  CHECK(a.labels == std::vector<int>{0, 0, 0, 0, 1, 1, 1, 1});
}

TEST_CASE("points farther apart than eps are all noise") {
  const Tensor x = Tensor::matrix({{0, 0}, {1, 0}, {0, 1}, {1, 1}});
  const auto a = dbscan(x, 0.5, 2);
  CHECK(a.all_noise);
  CHECK(a.num_clusters == 0);
  CHECK(a.labels == std::vector<int>(4, -1));
}

TEST_CASE("radius is inclusive and min_pts counts the point itself") {
  const Tensor x = Tensor::matrix({{0}, {1}});
  CHECK(dbscan(x, 1.0, 2).num_clusters == 1);
  CHECK(dbscan(x, 0.999, 2).all_noise);
  CHECK(dbscan(x, 1e-9, 1).num_clusters == 2);
  CHECK_THROWS_AS(dbscan(x, 0.0, 1), ConfigError);
}

TEST_CASE("dbscan matches the brute-force oracle on uniform points") {
  Rng rng(30);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = uniform({200, 2}, rng, 0.0, 1.0);
    const auto got = dbscan(x, 0.1, 4);
    const auto want = oracle::dbscan(x, 0.1, 4);
    CHECK(got.labels == want.labels);
    CHECK(got.num_clusters == want.num_clusters);
  }
}

TEST_CASE("dbscan partition does not depend on sample order") {
  Rng rng(31);
  const Tensor x = uniform({80, 2}, rng, 0.0, 1.0);
  std::vector<std::size_t> perm(80);
  for (std::size_t i = 0; i < 80; ++i) perm[i] = (i * 37) % 80;
  const auto a = dbscan(x, 0.12, 3), b = dbscan(permute_rows(x, perm), 0.12, 3);
  // Border points may legitimately switch between clusters; core points may not.
  std::vector<int> core_a, core_b;
  for (std::size_t i = 0; i < 80; ++i) {
    std::size_t n = 0;
    for (std::size_t j = 0; j < 80; ++j) {
      const double dx = x.at(perm[i], 0) - x.at(perm[j], 0), dy = x.at(perm[i], 1) - x.at(perm[j], 1);
      n += dx * dx + dy * dy <= 0.12 * 0.12;
    }
    if (n >= 3) {
      core_a.push_back(a.labels[perm[i]]);
      core_b.push_back(b.labels[i]);
    }
  }
  CHECK(oracle::same_partition(core_a, core_b));
  CHECK(a.noise_count() == b.noise_count());
  CHECK(a.num_clusters == b.num_clusters);
}

TEST_CASE("larger eps never adds noise") {
  Rng rng(32);
  const Tensor x = uniform({120, 2}, rng, 0.0, 1.0);
  std::size_t prev = 121;
  for (double eps : {0.02, 0.05, 0.08, 0.12, 0.2, 0.4}) {
    const std::size_t noise = dbscan(x, eps, 4).noise_count();
    CHECK(noise <= prev);
    prev = noise;
  }
}

TEST_CASE("duplicate points form one cluster") {
  const Tensor x({6, 3}, 0.25);
  const auto a = dbscan(x, 1e-9, 6);
  CHECK(a.num_clusters == 1);
  CHECK(a.noise_count() == 0);
}

TEST_CASE("pseudo labels recover well-separated identities") {
  Rng rng(33);
  const std::size_t ids = 5, per = 12, c = 16;
  const Tensor centers = l2_normalize_rows(randn({ids, c}, rng));
  Tensor x({ids * per, c});
  std::vector<int> truth;
  for (std::size_t i = 0; i < ids; ++i)
    for (std::size_t n = 0; n < per; ++n) {
      for (std::size_t k = 0; k < c; ++k) x.at(i * per + n, k) = centers.at(i, k) + 0.05 * rng.normal();
      truth.push_back(static_cast<int>(i));
    }
  const auto a = generate_pseudo_labels(x, ClusterConfig{0.4, 4}, 3);
  CHECK(a.epoch == 3);
  CHECK(a.num_clusters == 5);
  CHECK(rand_index(a.labels, truth) >= 0.95);
  CHECK(a.labels == oracle::dbscan(l2_normalize_rows(x), 0.4, 4).labels);
}

TEST_CASE("pseudo labels ignore feature scale") {
  Rng rng(34);
  const Tensor x = randn({40, 4}, rng);
  Tensor y = x;
  for (double& v : y.data()) v *= 7.5;
  CHECK(generate_pseudo_labels(x, {0.4, 3}).labels == generate_pseudo_labels(y, {0.4, 3}).labels);
  const Tensor n = l2_normalize_rows(x);
  for (std::size_t i = 0; i < 40; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < 4; ++k) s += n.at(i, k) * n.at(i, k);
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("assignment csv export") {
  PseudoLabelAssignment a;
  a.labels = {0, -1, 1};
  a.num_clusters = 2;
  const auto path = std::filesystem::temp_directory_path() / "damix_test_labels.csv";
  write_assignment_csv(path, a);
  std::ifstream in(path);
  std::stringstream s;
  s << in.rdbuf();
  CHECK(s.str() == "sample_id,label\n0,0\n1,-1\n2,1\n");
  std::filesystem::remove(path);
}
