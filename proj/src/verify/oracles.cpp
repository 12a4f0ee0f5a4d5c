#include "damix/verify/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace damix::oracle {

namespace {

double dist2(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.extent(1); ++k) s += (a.at(i, k) - b.at(j, k)) * (a.at(i, k) - b.at(j, k));
  return s;
}

std::size_t find(std::vector<std::size_t>& parent, std::size_t i) {
  while (parent[i] != i) i = parent[i] = parent[parent[i]];
  return i;
}

double leaky(double v, double slope) { return v >= 0.0 ? v : slope * v; }

std::vector<double> class_mean(const Tensor& x, std::span<const int> labels, int id) {
  std::vector<double> m(x.extent(1), 0.0);
  double n = 0.0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] != id) continue;
    n += 1.0;
    for (std::size_t k = 0; k < m.size(); ++k) m[k] += x.at(r, k);
  }
  for (double& v : m) v /= n;
  return m;
}

std::vector<int> distinct(std::span<const int> labels) {
  std::vector<int> ids(labels.begin(), labels.end());
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

}  // namespace

cluster::PseudoLabelAssignment dbscan(const Tensor& points, double eps, std::size_t min_pts) {
  const std::size_t n = points.extent(0);
  std::vector<std::vector<bool>> near(n, std::vector<bool>(n, false));
  std::vector<bool> core(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t count = 0;
    for (std::size_t j = 0; j < n; ++j) {
      near[i][j] = std::sqrt(dist2(points, i, points, j)) <= eps;
      if (near[i][j]) ++count;
    }
    core[i] = count >= min_pts;
  }
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (core[i] && core[j] && near[i][j]) parent[find(parent, i)] = find(parent, j);

  cluster::PseudoLabelAssignment out;
  out.labels.assign(n, -1);
  std::map<std::size_t, int> cluster_of_root;
  for (std::size_t i = 0; i < n; ++i) {
    if (!core[i]) continue;
    const std::size_t root = find(parent, i);
    auto it = cluster_of_root.find(root);
    if (it == cluster_of_root.end()) it = cluster_of_root.emplace(root, out.num_clusters++).first;
    out.labels[i] = it->second;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (core[i]) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (core[j] && near[i][j] && (out.labels[i] < 0 || out.labels[j] < out.labels[i])) out.labels[i] = out.labels[j];
    }
  }
  out.all_noise = n > 0 && out.num_clusters == 0;
  return out;
}

bool same_partition(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) return false;
  std::map<int, int> ab, ba;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if ((a[i] < 0) != (b[i] < 0)) return false;
    if (a[i] < 0) continue;
    auto [it1, new1] = ab.emplace(a[i], b[i]);
    auto [it2, new2] = ba.emplace(b[i], a[i]);
    if (it1->second != b[i] || it2->second != a[i]) return false;
  }
  return true;
}

eval::RetrievalResult retrieval(const Tensor& query, std::span<const int> query_ids, const Tensor& gallery,
                                std::span<const int> gallery_ids) {
  const std::size_t nq = query_ids.size(), ng = gallery_ids.size();
  eval::RetrievalResult r;
  r.cmc.assign(ng, 0.0);
  for (std::size_t i = 0; i < nq; ++i) {
    // Rank of j: gallery items strictly ahead in (distance, index) order.
    std::vector<std::size_t> rank(ng, 0);
    for (std::size_t j = 0; j < ng; ++j) {
      const double dj = dist2(query, i, gallery, j);
      for (std::size_t k = 0; k < ng; ++k) {
        const double dk = dist2(query, i, gallery, k);
        if (dk < dj || (dk == dj && k < j)) ++rank[j];
      }
    }
    std::vector<std::size_t> positive_ranks;
    for (std::size_t j = 0; j < ng; ++j)
      if (gallery_ids[j] == query_ids[i]) positive_ranks.push_back(rank[j]);
    std::sort(positive_ranks.begin(), positive_ranks.end());
    double ap = 0.0;
    for (std::size_t m = 0; m < positive_ranks.size(); ++m) ap += double(m + 1) / double(positive_ranks[m] + 1);
    r.average_precision.push_back(ap / double(positive_ranks.size()));
    for (std::size_t k = positive_ranks.front(); k < ng; ++k) r.cmc[k] += 1.0;
  }
  double sum = 0.0;
  for (double ap : r.average_precision) sum += ap;
  r.mean_ap = nq ? sum / double(nq) : 0.0;
  for (double& c : r.cmc) c = nq ? c / double(nq) : 0.0;
  return r;
}

double interclass_distance(const Tensor& features, std::span<const int> labels) {
  const std::vector<int> ids = distinct(labels);
  double total = 0.0, pairs = 0.0;
  for (std::size_t a = 0; a < ids.size(); ++a) {
    const auto ma = class_mean(features, labels, ids[a]);
    for (std::size_t b = a + 1; b < ids.size(); ++b) {
      const auto mb = class_mean(features, labels, ids[b]);
      double s = 0.0;
      for (std::size_t k = 0; k < ma.size(); ++k) s += (ma[k] - mb[k]) * (ma[k] - mb[k]);
      total += std::sqrt(s);
      pairs += 1.0;
    }
  }
  return total / pairs;
}

double intraclass_variance(const Tensor& features, std::span<const int> labels, bool per_sample) {
  const std::vector<int> ids = distinct(labels);
  double total = 0.0;
  for (int id : ids) {
    const auto m = class_mean(features, labels, id);
    double s = 0.0, n = 0.0;
    for (std::size_t r = 0; r < labels.size(); ++r) {
      if (labels[r] != id) continue;
      n += 1.0;
      for (std::size_t k = 0; k < m.size(); ++k) s += (features.at(r, k) - m[k]) * (features.at(r, k) - m[k]);
    }
    total += per_sample ? s / n : s;
  }
  return total / double(ids.size());
}

Tensor adjacency(std::size_t num_domains, std::size_t per_domain, int layer) {
  const std::size_t instances = num_domains * per_domain, n = instances + num_domains;
  Tensor a({n, n}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const bool agent_i = i >= instances, agent_j = j >= instances;
      bool edge = i == j || (agent_i && agent_j);
      if (layer == 2 && agent_i != agent_j) {
        const std::size_t inst = agent_i ? j : i, agent = agent_i ? i : j;
        edge = edge || inst / per_domain == agent - instances;
      }
      a.at(i, j) = edge ? 1.0 : 0.0;
    }
  }
  return a;
}

Tensor normalize(const Tensor& a) {
  const std::size_t n = a.extent(0);
  std::vector<double> deg(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) deg[i] += a.at(i, j);
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = a.at(i, j) / std::sqrt(deg[i]) / std::sqrt(deg[j]);
  return out;
}

Tensor gcn_layer(const Tensor& normalized, const Tensor& h, const Tensor& w, double slope) {
  const std::size_t n = h.extent(0), c_in = h.extent(1), c_out = w.extent(1);
  Tensor out({n, c_out}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t o = 0; o < c_out; ++o) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < c_in; ++k) s += normalized.at(i, j) * h.at(j, k) * w.at(k, o);
      out.at(i, o) = leaky(s, slope);
    }
  }
  return out;
}

Tensor mdif_train(const Tensor& h0, std::size_t num_domains, const Tensor& w1, const Tensor& w2,
                  const Tensor& head_weight, double head_bias, double slope) {
  const std::size_t instances = h0.extent(0), c = h0.extent(1), q = instances / num_domains;
  Tensor h({instances + num_domains, c}, 0.0);
  for (std::size_t i = 0; i < instances; ++i)
    for (std::size_t k = 0; k < c; ++k) h.at(i, k) = h0.at(i, k);
  for (std::size_t d = 0; d < num_domains; ++d) {
    std::vector<double> logit(q, head_bias);
    double total = 0.0;
    for (std::size_t n = 0; n < q; ++n) {
      for (std::size_t k = 0; k < c; ++k) logit[n] += h0.at(d * q + n, k) * head_weight[k];
      total += logit[n];
    }
    for (std::size_t n = 0; n < q; ++n)
      for (std::size_t k = 0; k < c; ++k) h.at(instances + d, k) += logit[n] / total * h0.at(d * q + n, k);
  }
  const Tensor h1 = gcn_layer(normalize(adjacency(num_domains, q, 1)), h, w1, slope);
  const Tensor h2 = gcn_layer(normalize(adjacency(num_domains, q, 2)), h1, w2, slope);
  Tensor out = h0;
  for (std::size_t i = 0; i < instances; ++i)
    for (std::size_t k = 0; k < c; ++k) out.at(i, k) += h2.at(i, k);
  return out;
}

double triplet(const Tensor& features, std::span<const int> labels, double margin) {
  const std::size_t n = labels.size();
  double total = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    // Every (positive, negative) pair; the worst one is the batch-hard term.
    double worst = -INFINITY;
    for (std::size_t p = 0; p < n; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      for (std::size_t m = 0; m < n; ++m) {
        if (labels[m] == labels[a]) continue;
        const double v = margin + std::sqrt(dist2(features, a, features, p)) - std::sqrt(dist2(features, a, features, m));
        worst = std::max(worst, v);
      }
    }
    total += std::max(0.0, worst);
  }
  return total / double(n);
}

double cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const std::size_t k = logits.extent(1);
  double total = 0.0, rows = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(logits.at(i, j));
    total += std::log(z) - logits.at(i, static_cast<std::size_t>(labels[i]));
    rows += 1.0;
  }
  return total / rows;
}

}  // namespace damix::oracle
