#include "damix/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "damix/clustering.hpp"
#include "damix/errors.hpp"

namespace damix::eval {

double RetrievalResult::rank(std::size_t k) const {
  if (cmc.empty() || k == 0) return 0.0;
  return cmc[std::min(k, cmc.size()) - 1];
}

namespace {

double squared_distance(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  const std::size_t c = a.extent(1);
  double s = 0.0;
  for (std::size_t k = 0; k < c; ++k) {
    const double d = a.at(i, k) - b.at(j, k);
    s += d * d;
  }
  return s;
}

std::map<int, std::vector<std::size_t>> group_rows(std::span<const int> labels) {
  std::map<int, std::vector<std::size_t>> g;
  for (std::size_t i = 0; i < labels.size(); ++i) g[labels[i]].push_back(i);
  return g;
}

Tensor mean_row(const Tensor& x, const std::vector<std::size_t>& rows) {
  const std::size_t c = x.extent(1);
  Tensor m({c}, 0.0);
  for (std::size_t r : rows)
    for (std::size_t k = 0; k < c; ++k) m[k] += x.at(r, k);
  for (std::size_t k = 0; k < c; ++k) m[k] /= static_cast<double>(rows.size());
  return m;
}

double distance(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

void check_matrix(const Tensor& x, std::size_t n, const char* what) {
  if (x.rank() != 2 || x.extent(0) != n) {
    throw DimensionError(std::string(what) + ": expected " + std::to_string(n) + " feature rows, got " +
                         shape_to_string(x.shape()));
  }
}

}  // namespace

RetrievalResult evaluate_retrieval(const Tensor& query, std::span<const int> query_ids, const Tensor& gallery,
                                   std::span<const int> gallery_ids, const RetrievalOptions& options) {
  check_matrix(query, query_ids.size(), "evaluate_retrieval query");
  check_matrix(gallery, gallery_ids.size(), "evaluate_retrieval gallery");
  if (query.extent(1) != gallery.extent(1)) throw DimensionError("query and gallery feature widths differ");
  const Tensor q = options.l2_normalize ? cluster::l2_normalize_rows(query) : query;
  const Tensor g = options.l2_normalize ? cluster::l2_normalize_rows(gallery) : gallery;

  const std::size_t nq = query_ids.size(), ng = gallery_ids.size();
  RetrievalResult r;
  std::vector<std::size_t> hits(ng, 0);  // queries whose first match is at rank k+1
  std::vector<std::size_t> order(ng);
  std::vector<double> d(ng);
  for (std::size_t i = 0; i < nq; ++i) {
    for (std::size_t j = 0; j < ng; ++j) d[j] = squared_distance(q, i, g, j);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&d](std::size_t a, std::size_t b) { return d[a] < d[b]; });
    std::size_t relevant = 0, first = ng;
    double precision_sum = 0.0;
    for (std::size_t k = 0; k < ng; ++k) {
      if (gallery_ids[order[k]] != query_ids[i]) continue;
      ++relevant;
      precision_sum += static_cast<double>(relevant) / static_cast<double>(k + 1);
      if (first == ng) first = k;
    }
    if (relevant == 0) {
      throw EvaluationError("query identity " + std::to_string(query_ids[i]) + " does not appear in the gallery");
    }
    r.average_precision.push_back(precision_sum / static_cast<double>(relevant));
    ++hits[first];
  }
  r.mean_ap = nq ? std::accumulate(r.average_precision.begin(), r.average_precision.end(), 0.0) / static_cast<double>(nq)
                 : 0.0;
  r.cmc.resize(ng);
  std::size_t cumulative = 0;
  for (std::size_t k = 0; k < ng; ++k) {
    cumulative += hits[k];
    r.cmc[k] = nq ? static_cast<double>(cumulative) / static_cast<double>(nq) : 0.0;
  }
  return r;
}

DomainDistances domain_distance_matrix(const Tensor& features, std::span<const int> domain_ids) {
  check_matrix(features, domain_ids.size(), "domain_distance_matrix");
  const auto groups = group_rows(domain_ids);
  if (groups.empty()) throw EvaluationError("domain_distance_matrix: no samples");
  const std::size_t nd = groups.size(), c = features.extent(1);
  DomainDistances out;
  out.means = Tensor({nd, c});
  std::vector<Tensor> means;
  for (const auto& [d, rows] : groups) {
    out.domains.push_back(d);
    means.push_back(mean_row(features, rows));
    std::copy(means.back().data().begin(), means.back().data().end(),
              out.means.data().begin() + static_cast<std::ptrdiff_t>((means.size() - 1) * c));
  }
  out.distance = Tensor({nd, nd}, 0.0);
  for (std::size_t a = 0; a < nd; ++a)
    for (std::size_t b = a + 1; b < nd; ++b) out.distance.at(a, b) = out.distance.at(b, a) = distance(means[a], means[b]);
  return out;
}

double interclass_distance(const Tensor& features, std::span<const int> identity_labels) {
  check_matrix(features, identity_labels.size(), "interclass_distance");
  const auto groups = group_rows(identity_labels);
  if (groups.size() < 2) throw EvaluationError("interclass_distance needs at least 2 identities");
  std::vector<Tensor> means;
  for (const auto& [id, rows] : groups) means.push_back(mean_row(features, rows));
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < means.size(); ++i) {
    for (std::size_t j = i + 1; j < means.size(); ++j) {
      total += distance(means[i], means[j]);
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

double intraclass_variance(const Tensor& features, std::span<const int> identity_labels, bool per_sample) {
  check_matrix(features, identity_labels.size(), "intraclass_variance");
  const auto groups = group_rows(identity_labels);
  if (groups.empty()) throw EvaluationError("intraclass_variance needs at least one identity");
  const std::size_t c = features.extent(1);
  double total = 0.0;
  for (const auto& [id, rows] : groups) {
    const Tensor mu = mean_row(features, rows);
    double s = 0.0;
    for (std::size_t r : rows)
      for (std::size_t k = 0; k < c; ++k) s += (features.at(r, k) - mu[k]) * (features.at(r, k) - mu[k]);
    total += per_sample ? s / static_cast<double>(rows.size()) : s;
  }
  return total / static_cast<double>(groups.size());
}

DomainGapReport domain_gap_report(const Tensor& features, std::span<const int> domain_ids,
                                  std::span<const int> identity_labels, bool per_sample) {
  DomainGapReport rep;
  rep.distances = domain_distance_matrix(features, domain_ids);
  for (const auto& [d, rows] : group_rows(domain_ids)) {
    const Tensor sub = [&] {
      Tensor t({rows.size(), features.extent(1)});
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t k = 0; k < features.extent(1); ++k) t.at(i, k) = features.at(rows[i], k);
      return t;
    }();
    std::vector<int> ids;
    for (std::size_t r : rows) ids.push_back(identity_labels[r]);
    if (std::set<int>(ids.begin(), ids.end()).size() >= 2) rep.interclass[d] = interclass_distance(sub, ids);
    rep.intraclass[d] = intraclass_variance(sub, ids, per_sample);
  }
  rep.interclass_combined = interclass_distance(features, identity_labels);
  rep.intraclass_combined = intraclass_variance(features, identity_labels, per_sample);
  return rep;
}

}  // namespace damix::eval
