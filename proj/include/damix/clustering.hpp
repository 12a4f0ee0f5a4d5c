#pragma once

#include <filesystem>
#include <vector>

#include "damix/numerics/tensor.hpp"

namespace damix::cluster {

/// Cluster id per sample; -1 marks noise.
struct PseudoLabelAssignment {
  std::vector<int> labels;
  int num_clusters = 0;
  int epoch = 0;
  /// Set when every sample came out as noise.
  bool all_noise = false;

  std::size_t noise_count() const;
};

struct ClusterConfig {
  double eps = 0.5;
  std::size_t min_pts = 4;
};

/// Density clustering with inclusive radius (distance <= eps) and min_pts
/// counting the point itself. Points are scanned in index order, so cluster
/// ids follow the lowest core index and a border point joins the first
/// cluster that reaches it.
PseudoLabelAssignment dbscan(const Tensor& points, double eps, std::size_t min_pts);

/// Rows L2-normalized, then dbscan.
PseudoLabelAssignment generate_pseudo_labels(const Tensor& features, const ClusterConfig& config, int epoch = 0);

Tensor l2_normalize_rows(const Tensor& x);

/// CSV with header "sample_id,label".
void write_assignment_csv(const std::filesystem::path& path, const PseudoLabelAssignment& a);

}  // namespace damix::cluster
