#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "damix/numerics/tensor.hpp"

namespace damix::pipeline {

enum class Role { source, target };

/// Samples of one domain. `labels` are local identity ids (0..I-1) for a
/// source and pseudo-labels (-1 = unassigned/noise) for the target.
/// `identities` holds the generator's global identity ids; training never
/// reads them for the target.
struct DomainDataset {
  int domain = 0;
  Role role = Role::source;
  Tensor inputs;  // N x C_in x L
  std::vector<int> labels;
  std::vector<int> identities;

  std::size_t size() const { return labels.size(); }
  /// Distinct labels >= 0, ascending.
  std::vector<int> label_set() const;
  /// Throws ConfigError when a source sample is unlabeled or shapes disagree.
  void validate() const;
};

struct BatchPlan {
  std::size_t identities_per_domain = 8;  // P
  std::size_t samples_per_identity = 4;   // R
  /// Draw identities with repetition when a domain has fewer than P of them.
  /// Off by default: too few identities is a sampling error.
  bool reuse_identities = false;

  std::size_t per_domain() const { return identities_per_domain * samples_per_identity; }
};

struct DomainBatch {
  Tensor inputs;  // B x C_in x L
  std::vector<int> domain_ids;
  std::vector<int> labels;  // local labels; -1 for unlabeled target draws
  std::vector<std::size_t> source_rows;  // row index inside its dataset

  std::size_t size() const { return labels.size(); }
};

/// P identities per dataset, R samples each (with replacement only when an
/// identity has fewer than R samples). Deterministic in `seed`.
/// A dataset flagged in `unlabeled_fallback` contributes P*R uniform draws
/// labeled -1 instead; used when clustering produced no clusters.
DomainBatch sample_batch(std::span<const DomainDataset> datasets, const BatchPlan& plan, std::uint64_t seed,
                         std::span<const int> unlabeled_fallback = {});

/// Row subset of a dataset's inputs.
Tensor gather_inputs(const Tensor& inputs, std::span<const std::size_t> rows);

}  // namespace damix::pipeline
