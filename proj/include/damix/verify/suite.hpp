#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "damix/config.hpp"
#include "damix/run.hpp"

namespace damix::verify {

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct CriterionReport {
  int id = 0;
  std::string title;
  std::vector<Check> checks;
  double seconds = 0.0;

  bool passed() const;
  void add(std::string name, bool ok, std::string detail = {});
};

/// Finite-difference checks of every differentiable block and of the full
/// adaptation loss on a tiny model.
CriterionReport gradient_integrity();
/// Standardization moments and the r = 0 rectifier identity.
CriterionReport normalization_invariants();
/// Fusion graph structure, eval-mode independence, zero-parameter residual.
CriterionReport graph_invariants();
/// Clustering, retrieval and class-spread metrics against brute-force oracles.
CriterionReport oracle_equivalence();
/// Geometric convergence of running statistics and agents.
CriterionReport moving_averages();
/// Byte-identical reruns and bitwise checkpoint round trips. `scratch` is
/// an empty directory for the throwaway runs.
CriterionReport determinism(const std::filesystem::path& scratch);

struct AblationOutcome {
  CriterionReport directional;
  CriterionReport domain_gap;
  std::vector<AblationRow> rows;
  double seconds = 0.0;
};

/// Six-variant ablation over `seeds`; rank-1 ordering and the fused
/// domain-distance comparison.
AblationOutcome ablation(const ExperimentConfig& config, std::span<const std::uint64_t> seeds);

/// Criteria 1-4, 7, 8: the fast invariant suite.
std::vector<CriterionReport> invariant_suite(const std::filesystem::path& scratch);

/// "criterion N: PASS title (k/n checks, t s)" plus one indented line per
/// failed check.
std::string format(const CriterionReport& report);

}  // namespace damix::verify
