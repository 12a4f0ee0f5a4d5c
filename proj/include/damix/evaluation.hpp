#pragma once

#include <map>
#include <span>
#include <vector>

#include "damix/numerics/tensor.hpp"

namespace damix::eval {

struct RetrievalResult {
  double mean_ap = 0.0;
  /// cmc[k-1] = fraction of queries with a correct match in the top k,
  /// for k = 1..gallery size.
  std::vector<double> cmc;
  std::vector<double> average_precision;

  /// Rank-k accuracy; k beyond the gallery saturates at the last entry.
  double rank(std::size_t k) const;
};

struct RetrievalOptions {
  bool l2_normalize = false;
};

/// Ranks the whole gallery per query by Euclidean distance (ties by gallery
/// index). Throws EvaluationError for a query identity missing from the gallery.
RetrievalResult evaluate_retrieval(const Tensor& query, std::span<const int> query_ids, const Tensor& gallery,
                                   std::span<const int> gallery_ids, const RetrievalOptions& options = {});

struct DomainDistances {
  std::vector<int> domains;
  Tensor means;     // D x C
  Tensor distance;  // D x D
};

/// Euclidean distances between per-domain mean features.
DomainDistances domain_distance_matrix(const Tensor& features, std::span<const int> domain_ids);

/// Mean over identity pairs of the distance between identity mean features.
double interclass_distance(const Tensor& features, std::span<const int> identity_labels);

/// Per identity the summed squared deviation from its mean, averaged over
/// identities. `per_sample` divides each identity's sum by its sample count.
double intraclass_variance(const Tensor& features, std::span<const int> identity_labels, bool per_sample = false);

struct DomainGapReport {
  DomainDistances distances;
  std::map<int, double> interclass;
  std::map<int, double> intraclass;
  double interclass_combined = 0.0;
  double intraclass_combined = 0.0;
};

DomainGapReport domain_gap_report(const Tensor& features, std::span<const int> domain_ids,
                                  std::span<const int> identity_labels, bool per_sample = false);

}  // namespace damix::eval
