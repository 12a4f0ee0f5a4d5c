#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "damix/numerics/binding.hpp"
#include "damix/numerics/tape.hpp"
#include "damix/numerics/tensor_io.hpp"

namespace damix::norm {

/// Affine parameters of one normalization branch plus its hyperparameters.
struct BnParams {
  Tensor gamma;  // [C]
  Tensor beta;   // [C]
  double eps = 1e-5;
  double momentum = 0.1;

  static BnParams init(std::size_t channels, double eps = 1e-5, double momentum = 0.1);
  std::size_t channels() const { return gamma.size(); }
  /// Throws ConfigError / DimensionError on a broken invariant.
  void validate() const;
};

/// Moving-average statistics used at inference.
struct RunningStats {
  Tensor mean;  // [C]
  Tensor var;   // [C]
  std::int64_t step = 0;

  static RunningStats init(std::size_t channels);
};

/// mean <- (1-alpha) mean + alpha batch_mean, same for var; step + 1.
RunningStats update_running_stats(const RunningStats& stats, const Tensor& batch_mean, const Tensor& batch_var,
                                  double alpha);

/// Per-channel standardization (x - mu) / sqrt(var + eps) of an N x C x L
/// batch. Train mode uses biased batch statistics over the N and L axes and
/// folds them into `stats`; eval mode reads `stats`.
Var standardize(const Var& x, RunningStats& stats, double eps, double alpha, Mode mode);

/// gamma * standardize(x) + beta.
Var bn_forward(Binder& bind, const Var& x, const BnParams& params, RunningStats& stats, Mode mode);

/// Channel gate in (0,1) for one instance x_n (C x L):
/// sigmoid(1_M * (r * [mu_n; sigma_n])), r is M x 2, sigma_n includes eps.
Var rectifier_weights(const Var& x_n, const Var& rectifier, double eps = 1e-5);

/// rectifier_weights for every sample of an N x C x L batch -> N x C x 1.
Var rectifier_weights_batch(const Var& x, const Var& rectifier, double eps = 1e-5);

struct DomainBranch {
  BnParams bn;
  RunningStats stats;
  Tensor rectifier;  // [M, 2]
};

/// One normalization branch per domain id.
class RdsbnState {
 public:
  RdsbnState() = default;
  RdsbnState(std::size_t channels, std::size_t rank = 1, double eps = 1e-5, double momentum = 0.1);

  /// Registers a fresh branch (gamma 1, beta 0, stats 0/1, rectifier 0).
  DomainBranch& add_domain(int domain);
  bool has_domain(int domain) const { return branches_.count(domain) != 0; }
  DomainBranch& branch(int domain);
  const DomainBranch& branch(int domain) const;
  std::vector<int> domains() const;

  std::size_t channels() const { return channels_; }
  std::size_t rank() const { return rank_; }
  double eps() const { return eps_; }
  double momentum() const { return momentum_; }

  void save(TensorArchive& archive, const std::string& prefix) const;
  static RdsbnState load(const TensorArchive& archive, const std::string& prefix);

 private:
  std::size_t channels_ = 0;
  std::size_t rank_ = 1;
  double eps_ = 1e-5;
  double momentum_ = 0.1;
  std::map<int, DomainBranch> branches_;
};

/// Domain-specific normalization of an N x C x L batch. Samples are grouped
/// by domain tag and each group is standardized by its own branch, then
/// scaled by (gamma x_hat + beta) and, when `rectify`, by the per-instance
/// gate a_n. Output rows follow input order.
Var rdsbn_forward(Binder& bind, const Var& x, std::span<const int> domain_ids, RdsbnState& state, Mode mode,
                  bool rectify = true);

/// Eval-mode normalizer pinned to a single branch, whatever the sample tags.
class BranchNormalizer {
 public:
  BranchNormalizer(RdsbnState& state, int domain, bool rectify);
  Var apply(Binder& bind, const Var& x) const;
  int domain() const { return domain_; }

 private:
  RdsbnState* state_;
  int domain_;
  bool rectify_;
};

BranchNormalizer eval_branch_select(RdsbnState& state, int target_domain, bool rectify = true);

enum class NormKind { bn, dsbn, rdsbn };

const char* to_string(NormKind kind);
NormKind parse_norm_kind(const std::string& s);

/// Normalization slot of a network block: shared BN, plain DSBN, or RDSBN.
/// BN keeps a single branch under id 0 and routes every sample through it.
class NormLayer {
 public:
  NormLayer() = default;
  NormLayer(NormKind kind, std::size_t channels, std::size_t rank, double eps, double momentum);

  void add_domain(int domain);
  Var forward(Binder& bind, const Var& x, std::span<const int> domain_ids, Mode mode);
  /// Eval pass through one domain's branch for all samples.
  Var forward_branch(Binder& bind, const Var& x, int domain);

  NormKind kind() const { return kind_; }
  void set_kind(NormKind kind) { kind_ = kind; }
  RdsbnState& state() { return state_; }
  const RdsbnState& state() const { return state_; }
  int branch_for(int domain) const { return kind_ == NormKind::bn ? 0 : domain; }

 private:
  NormKind kind_ = NormKind::rdsbn;
  RdsbnState state_;
};

}  // namespace damix::norm
