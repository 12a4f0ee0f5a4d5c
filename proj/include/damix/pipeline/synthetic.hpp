#pragma once

#include <cstdint>
#include <vector>

#include "damix/pipeline/dataset.hpp"

namespace damix::pipeline {

/// Each domain draws its own identity prototypes (one C-vector each) and a
/// style: a channel mixing matrix, per-channel log-scale and shift. A sample
/// is style(prototype + noise) at every position, with an extra per-sample
/// jitter of the channel scale and shift. The last domain is the target.
struct SyntheticSpec {
  std::size_t num_domains = 3;
  std::size_t identities_per_domain = 10;
  std::size_t samples_per_identity = 16;
  std::size_t channels = 8;
  std::size_t length = 12;
  double style_scale = 0.5;   // std of per-channel log-scale
  double style_shift = 1.0;   // std of per-channel shift
  double style_mixing = 0.3;  // std of off-identity mixing entries (scaled by 1/sqrt(C))
  double instance_jitter = 0.3;
  double noise = 1.0;
  /// Held-out target identities used only for query/gallery evaluation.
  std::size_t eval_identities = 30;
  std::size_t eval_samples_per_identity = 8;
  std::size_t queries_per_identity = 4;
  std::uint64_t seed = 0;

  void validate() const;
};

struct RetrievalSplit {
  int domain = 0;
  Tensor query;
  std::vector<int> query_ids;
  Tensor gallery;
  std::vector<int> gallery_ids;
};

struct SyntheticData {
  std::vector<DomainDataset> domains;  // sources first, target last
  RetrievalSplit eval;                 // target-domain held-out identities

  std::vector<DomainDataset> sources() const;
  const DomainDataset& target() const { return domains.back(); }
};

/// Target labels start at -1. Global identity ids are disjoint across
/// domains: domain d owns [d*I, (d+1)*I), held-out ids follow all domains.
SyntheticData generate_synthetic(const SyntheticSpec& spec);

}  // namespace damix::pipeline
