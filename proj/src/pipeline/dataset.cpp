#include "damix/pipeline/dataset.hpp"

#include <algorithm>
#include <map>
#include <random>
#include <set>

#include "damix/errors.hpp"

namespace damix::pipeline {

std::vector<int> DomainDataset::label_set() const {
  std::set<int> s;
  for (int l : labels) {
    if (l >= 0) s.insert(l);
  }
  return {s.begin(), s.end()};
}

void DomainDataset::validate() const {
  if (inputs.rank() != 3 || inputs.extent(0) != labels.size()) {
    throw ConfigError("domain " + std::to_string(domain) + ": inputs " + shape_to_string(inputs.shape()) +
                      " do not match " + std::to_string(labels.size()) + " labels");
  }
  if (!identities.empty() && identities.size() != labels.size()) {
    throw ConfigError("domain " + std::to_string(domain) + ": identity list length mismatch");
  }
  if (role == Role::source && std::any_of(labels.begin(), labels.end(), [](int l) { return l < 0; })) {
    throw ConfigError("source domain " + std::to_string(domain) + " has unlabeled samples");
  }
}

Tensor gather_inputs(const Tensor& inputs, std::span<const std::size_t> rows) {
  Shape s = inputs.shape();
  const std::size_t stride = inputs.size() / s[0];
  s[0] = rows.size();
  std::vector<double> data;
  data.reserve(rows.size() * stride);
  for (std::size_t r : rows) {
    auto first = inputs.data().begin() + static_cast<std::ptrdiff_t>(r * stride);
    data.insert(data.end(), first, first + static_cast<std::ptrdiff_t>(stride));
  }
  return Tensor(std::move(s), std::move(data));
}

namespace {

// Fisher-Yates prefix shuffle driven by raw engine output, so the draw
// sequence depends only on the engine, not on library distributions.
template <typename T>
void partial_shuffle(std::vector<T>& v, std::size_t count, std::mt19937_64& rng) {
  for (std::size_t i = 0; i < count && i + 1 < v.size(); ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (v.size() - i));
    std::swap(v[i], v[j]);
  }
}

}  // namespace

DomainBatch sample_batch(std::span<const DomainDataset> datasets, const BatchPlan& plan, std::uint64_t seed,
                         std::span<const int> unlabeled_fallback) {
  const std::size_t p = plan.identities_per_domain, r = plan.samples_per_identity;
  if (p == 0 || r == 0) throw ConfigError("batch plan needs P >= 1 and R >= 1");
  std::mt19937_64 rng(seed);
  DomainBatch batch;
  std::vector<double> data;
  std::size_t c_in = 0, len = 0;

  for (const DomainDataset& ds : datasets) {
    if (ds.inputs.rank() != 3) throw ConfigError("domain " + std::to_string(ds.domain) + " has no inputs");
    c_in = ds.inputs.extent(1);
    len = ds.inputs.extent(2);
    std::vector<std::size_t> rows;
    std::vector<int> labels;
    const bool fallback =
        std::find(unlabeled_fallback.begin(), unlabeled_fallback.end(), ds.domain) != unlabeled_fallback.end();
    if (fallback) {
      for (std::size_t k = 0; k < p * r; ++k) {
        rows.push_back(static_cast<std::size_t>(rng() % ds.size()));
        labels.push_back(-1);
      }
    } else {
      std::map<int, std::vector<std::size_t>> by_id;
      for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds.labels[i] >= 0) by_id[ds.labels[i]].push_back(i);
      }
      std::vector<int> ids;
      for (const auto& [id, members] : by_id) ids.push_back(id);
      if (ids.size() < p && !(plan.reuse_identities && !ids.empty())) {
        throw SamplingError("domain " + std::to_string(ds.domain) + " has " + std::to_string(ids.size()) +
                            " identities, batch plan needs " + std::to_string(p));
      }
      std::vector<int> chosen;
      while (chosen.size() < p) {
        std::vector<int> pool = ids;
        const std::size_t take = std::min(p - chosen.size(), pool.size());
        partial_shuffle(pool, take, rng);
        chosen.insert(chosen.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
      }
      for (int id : chosen) {
        std::vector<std::size_t> members = by_id[id];
        if (members.size() >= r) {
          partial_shuffle(members, r, rng);
          rows.insert(rows.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(r));
        } else {
          for (std::size_t k = 0; k < r; ++k) rows.push_back(members[rng() % members.size()]);
        }
        labels.insert(labels.end(), r, id);
      }
    }
    const std::size_t stride = c_in * len;
    for (std::size_t k = 0; k < rows.size(); ++k) {
      auto first = ds.inputs.data().begin() + static_cast<std::ptrdiff_t>(rows[k] * stride);
      data.insert(data.end(), first, first + static_cast<std::ptrdiff_t>(stride));
      batch.domain_ids.push_back(ds.domain);
      batch.labels.push_back(labels[k]);
      batch.source_rows.push_back(rows[k]);
    }
  }
  if (batch.labels.empty()) throw SamplingError("no datasets to sample from");
  batch.inputs = Tensor({batch.labels.size(), c_in, len}, std::move(data));
  return batch;
}

}  // namespace damix::pipeline
