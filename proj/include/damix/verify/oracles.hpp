#pragma once

#include <span>
#include <vector>

#include "damix/clustering.hpp"
#include "damix/evaluation.hpp"
#include "damix/numerics/tensor.hpp"

// Straight-line reference implementations. They share no code with the
// modules they check: plain loops over doubles, no tape, no broadcasting.
namespace damix::oracle {

/// Density reachability by brute force: core points within eps are joined
/// with union-find, clusters are numbered by their lowest core index and a
/// border point takes the lowest-numbered cluster among its core neighbours.
cluster::PseudoLabelAssignment dbscan(const Tensor& points, double eps, std::size_t min_pts);

/// True when both labelings induce the same partition and the same noise set.
bool same_partition(std::span<const int> a, std::span<const int> b);

/// Full sort per query, precision averaged over the positive ranks.
eval::RetrievalResult retrieval(const Tensor& query, std::span<const int> query_ids, const Tensor& gallery,
                                std::span<const int> gallery_ids);

double interclass_distance(const Tensor& features, std::span<const int> labels);
double intraclass_variance(const Tensor& features, std::span<const int> labels, bool per_sample);

/// Adjacency of the fusion graph read off its node roles.
Tensor adjacency(std::size_t num_domains, std::size_t per_domain, int layer);
/// D^-1/2 A D^-1/2 with explicit degree loops.
Tensor normalize(const Tensor& a);

/// leaky_relu(A H W) with triple loops.
Tensor gcn_layer(const Tensor& normalized, const Tensor& h, const Tensor& w, double slope);

/// Train-mode fusion with both adjacency matrices materialized.
/// `h0` rows must already be grouped by domain, Q rows each.
Tensor mdif_train(const Tensor& h0, std::size_t num_domains, const Tensor& w1, const Tensor& w2,
                  const Tensor& head_weight, double head_bias, double slope);

/// Mean over anchors of max(0, margin + max_p d - min_n d), every pair enumerated.
double triplet(const Tensor& features, std::span<const int> labels, double margin);

/// Mean of -log softmax(row)[label] over rows whose label is >= 0.
double cross_entropy(const Tensor& logits, std::span<const int> labels);

}  // namespace damix::oracle
