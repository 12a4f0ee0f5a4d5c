#include "damix/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>

#include "damix/errors.hpp"

namespace damix::cluster {

std::size_t PseudoLabelAssignment::noise_count() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), -1));
}

namespace {

std::vector<std::vector<std::size_t>> neighborhoods(const Tensor& points, double eps) {
  const std::size_t n = points.extent(0);
  const std::size_t c = points.size() / n;
  const double eps2 = eps * eps;
  std::vector<std::vector<std::size_t>> nb(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double diff = points[i * c + k] - points[j * c + k];
        d2 += diff * diff;
      }
      if (d2 <= eps2) {
        nb[i].push_back(j);
        if (j != i) nb[j].push_back(i);
      }
    }
  }
  for (auto& v : nb) std::sort(v.begin(), v.end());
  return nb;
}

}  // namespace

PseudoLabelAssignment dbscan(const Tensor& points, double eps, std::size_t min_pts) {
  if (!(eps > 0.0)) throw ConfigError("dbscan eps must be positive");
  if (min_pts < 1) throw ConfigError("dbscan min_pts must be at least 1");
  PseudoLabelAssignment out;
  if (points.empty()) return out;
  if (points.rank() != 2) throw DimensionError("dbscan expects N x C points, got " + shape_to_string(points.shape()));

  const std::size_t n = points.extent(0);
  const auto nb = neighborhoods(points, eps);
  constexpr int kUnassigned = -2;
  out.labels.assign(n, kUnassigned);

  for (std::size_t i = 0; i < n; ++i) {
    if (out.labels[i] != kUnassigned || nb[i].size() < min_pts) continue;
    const int cluster = out.num_clusters++;
    out.labels[i] = cluster;
    std::deque<std::size_t> frontier{i};
    while (!frontier.empty()) {
      const std::size_t p = frontier.front();
      frontier.pop_front();
      if (nb[p].size() < min_pts) continue;  // border: no expansion
      for (std::size_t q : nb[p]) {
        if (out.labels[q] == kUnassigned) {
          out.labels[q] = cluster;
          frontier.push_back(q);
        }
      }
    }
  }
  for (int& l : out.labels) {
    if (l == kUnassigned) l = -1;
  }
  out.all_noise = out.num_clusters == 0;
  return out;
}

Tensor l2_normalize_rows(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("l2_normalize_rows expects a matrix");
  Tensor out = x;
  const std::size_t n = x.extent(0), c = x.extent(1);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += x.at(i, k) * x.at(i, k);
    const double norm = std::sqrt(s);
    if (norm == 0.0) continue;
    for (std::size_t k = 0; k < c; ++k) out.at(i, k) = x.at(i, k) / norm;
  }
  return out;
}

PseudoLabelAssignment generate_pseudo_labels(const Tensor& features, const ClusterConfig& config, int epoch) {
  PseudoLabelAssignment a = features.empty() ? PseudoLabelAssignment{}
                                             : dbscan(l2_normalize_rows(features), config.eps, config.min_pts);
  a.epoch = epoch;
  a.all_noise = a.num_clusters == 0;
  return a;
}

void write_assignment_csv(const std::filesystem::path& path, const PseudoLabelAssignment& a) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "sample_id,label\n";
  for (std::size_t i = 0; i < a.labels.size(); ++i) out << i << ',' << a.labels[i] << '\n';
}

}  // namespace damix::cluster
