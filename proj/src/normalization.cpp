#include "damix/normalization.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "damix/errors.hpp"

namespace damix::norm {

namespace {

void check_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("moving-average rate must lie in [0,1], got " + std::to_string(alpha));
}

void check_batch(const Var& x, std::size_t channels) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw DimensionError("normalization expects N x C x L input, got " + shape_to_string(s));
  if (s[1] != channels) {
    throw DimensionError("input has " + std::to_string(s[1]) + " channels, parameters have " + std::to_string(channels));
  }
}

Var channel_view(Binder& bind, const Tensor& t) { return reshape(bind(t), {1, t.size(), 1}); }

}  // namespace

BnParams BnParams::init(std::size_t channels, double eps, double momentum) {
  BnParams p{Tensor({channels}, 1.0), Tensor({channels}, 0.0), eps, momentum};
  p.validate();
  return p;
}

void BnParams::validate() const {
  if (!(eps > 0.0)) throw ConfigError("normalization eps must be positive");
  check_alpha(momentum);
  if (gamma.shape() != beta.shape() || gamma.rank() != 1) {
    throw DimensionError("gamma " + shape_to_string(gamma.shape()) + " and beta " + shape_to_string(beta.shape()) +
                         " must be equal-length vectors");
  }
}

RunningStats RunningStats::init(std::size_t channels) { return {Tensor({channels}, 0.0), Tensor({channels}, 1.0), 0}; }

RunningStats update_running_stats(const RunningStats& stats, const Tensor& batch_mean, const Tensor& batch_var,
                                  double alpha) {
  check_alpha(alpha);
  if (batch_mean.shape() != stats.mean.shape() || batch_var.shape() != stats.var.shape()) {
    throw DimensionError("batch statistics " + shape_to_string(batch_mean.shape()) + " do not match running " +
                         shape_to_string(stats.mean.shape()));
  }
  RunningStats out = stats;
  for (std::size_t c = 0; c < out.mean.size(); ++c) {
    out.mean[c] = (1.0 - alpha) * stats.mean[c] + alpha * batch_mean[c];
    out.var[c] = (1.0 - alpha) * stats.var[c] + alpha * batch_var[c];
  }
  ++out.step;
  return out;
}

Var standardize(const Var& x, RunningStats& stats, double eps, double alpha, Mode mode) {
  check_batch(x, stats.mean.size());
  Tape& tape = x.tape();
  const std::size_t c = x.shape()[1];
  if (mode == Mode::train) {
    if (x.shape()[0] * x.shape()[2] < 2) {
      throw DegenerateBatchError("train-mode normalization needs at least 2 elements per channel");
    }
    Var mu = mean(x, {0, 2}, true);
    Var centered = x - mu;
    Var v = mean(square(centered), {0, 2}, true);
    stats = update_running_stats(stats, mu.value().reshaped({c}), v.value().reshaped({c}), alpha);
    return centered / sqrt(v + eps);
  }
  Var mu = tape.constant(stats.mean.reshaped({1, c, 1}));
  Var v = tape.constant(stats.var.reshaped({1, c, 1}));
  return (x - mu) / sqrt(v + eps);
}

Var bn_forward(Binder& bind, const Var& x, const BnParams& params, RunningStats& stats, Mode mode) {
  params.validate();
  check_batch(x, params.channels());
  Var xhat = standardize(x, stats, params.eps, params.momentum, mode);
  return xhat * channel_view(bind, params.gamma) + channel_view(bind, params.beta);
}

Var rectifier_weights(const Var& x_n, const Var& rectifier, double eps) {
  const Shape& s = x_n.shape();
  if (s.size() != 2) throw DimensionError("rectifier_weights expects C x L instance, got " + shape_to_string(s));
  if (rectifier.shape().size() != 2 || rectifier.shape()[1] != 2) {
    throw DimensionError("rectifier must be M x 2, got " + shape_to_string(rectifier.shape()));
  }
  const std::size_t c = s[0];
  const std::size_t m = rectifier.shape()[0];
  Tape& tape = x_n.tape();
  Var mu = mean(x_n, {1});                       // [C]
  Var sigma = sqrt(var(x_n, {1}) + eps);         // [C]
  std::vector<Var> rows{reshape(mu, {1, c}), reshape(sigma, {1, c})};
  Var stats = concat_rows(rows);                 // 2 x C
  Var ones = tape.constant(Tensor({1, m}, 1.0));
  return reshape(sigmoid(matmul(ones, matmul(rectifier, stats))), {c});
}

Var rectifier_weights_batch(const Var& x, const Var& rectifier, double eps) {
  if (x.shape().size() != 3) throw DimensionError("rectifier_weights_batch expects N x C x L, got " + shape_to_string(x.shape()));
  if (rectifier.shape().size() != 2 || rectifier.shape()[1] != 2) {
    throw DimensionError("rectifier must be M x 2, got " + shape_to_string(rectifier.shape()));
  }
  const std::size_t m = rectifier.shape()[0];
  Var mu = mean(x, {2}, true);                   // N x C x 1
  Var sigma = sqrt(var(x, {2}, true) + eps);     // N x C x 1
  Var r = reshape(rectifier, {m * 2});
  // Same accumulation order as the single-instance matrix chain.
  Var z;
  for (std::size_t k = 0; k < m; ++k) {
    const std::size_t i0[] = {2 * k};
    const std::size_t i1[] = {2 * k + 1};
    Var w_mu = reshape(take(r, i0), {1, 1, 1});
    Var w_sigma = reshape(take(r, i1), {1, 1, 1});
    Var term = mu * w_mu + sigma * w_sigma;
    z = z.valid() ? z + term : term;
  }
  return sigmoid(z);
}

RdsbnState::RdsbnState(std::size_t channels, std::size_t rank, double eps, double momentum)
    : channels_(channels), rank_(rank), eps_(eps), momentum_(momentum) {
  if (channels == 0) throw ConfigError("normalization needs at least one channel");
  if (rank == 0) throw ConfigError("rectifier rank must be at least 1");
  if (!(eps > 0.0)) throw ConfigError("normalization eps must be positive");
  check_alpha(momentum);
}

DomainBranch& RdsbnState::add_domain(int domain) {
  auto [it, inserted] = branches_.try_emplace(domain);
  if (inserted) {
    it->second.bn = BnParams::init(channels_, eps_, momentum_);
    it->second.stats = RunningStats::init(channels_);
    it->second.rectifier = Tensor({rank_, 2}, 0.0);
  }
  return it->second;
}

DomainBranch& RdsbnState::branch(int domain) {
  auto it = branches_.find(domain);
  if (it == branches_.end()) throw LookupError("no normalization branch for domain " + std::to_string(domain));
  return it->second;
}

const DomainBranch& RdsbnState::branch(int domain) const {
  auto it = branches_.find(domain);
  if (it == branches_.end()) throw LookupError("no normalization branch for domain " + std::to_string(domain));
  return it->second;
}

std::vector<int> RdsbnState::domains() const {
  std::vector<int> out;
  for (const auto& [d, b] : branches_) out.push_back(d);
  return out;
}

void RdsbnState::save(TensorArchive& archive, const std::string& prefix) const {
  archive.put(prefix + ".config", Tensor::vector({static_cast<double>(channels_), static_cast<double>(rank_), eps_, momentum_}));
  std::vector<double> ids;
  for (const auto& [d, b] : branches_) {
    ids.push_back(d);
    const std::string p = prefix + ".d" + std::to_string(d);
    archive.put(p + ".gamma", b.bn.gamma);
    archive.put(p + ".beta", b.bn.beta);
    archive.put(p + ".mean", b.stats.mean);
    archive.put(p + ".var", b.stats.var);
    archive.put(p + ".rectifier", b.rectifier);
    archive.put(p + ".step", Tensor::scalar(static_cast<double>(b.stats.step)));
  }
  if (!ids.empty()) archive.put(prefix + ".domains", Tensor::vector(ids));
}

RdsbnState RdsbnState::load(const TensorArchive& archive, const std::string& prefix) {
  const Tensor& cfg = archive.get(prefix + ".config");
  RdsbnState s(static_cast<std::size_t>(cfg[0]), static_cast<std::size_t>(cfg[1]), cfg[2], cfg[3]);
  if (!archive.contains(prefix + ".domains")) return s;
  for (double dv : archive.get(prefix + ".domains").data()) {
    const int d = static_cast<int>(dv);
    const std::string p = prefix + ".d" + std::to_string(d);
    DomainBranch& b = s.add_domain(d);
    b.bn.gamma = archive.get(p + ".gamma");
    b.bn.beta = archive.get(p + ".beta");
    b.stats.mean = archive.get(p + ".mean");
    b.stats.var = archive.get(p + ".var");
    b.stats.step = static_cast<std::int64_t>(archive.get(p + ".step").item());
    b.rectifier = archive.get(p + ".rectifier");
    if (b.rectifier.shape() != Shape{s.rank_, 2}) throw DimensionError("rectifier of domain " + std::to_string(d) + " is not M x 2");
  }
  return s;
}

namespace {

Var branch_forward(Binder& bind, const Var& x, DomainBranch& b, Mode mode, bool rectify) {
  Var y = bn_forward(bind, x, b.bn, b.stats, mode);
  if (!rectify) return y;
  return y * rectifier_weights_batch(x, bind(b.rectifier), b.bn.eps);
}

}  // namespace

Var rdsbn_forward(Binder& bind, const Var& x, std::span<const int> domain_ids, RdsbnState& state, Mode mode,
                  bool rectify) {
  check_batch(x, state.channels());
  const std::size_t n = x.shape()[0];
  if (domain_ids.size() != n) {
    throw DimensionError("got " + std::to_string(domain_ids.size()) + " domain tags for " + std::to_string(n) + " samples");
  }
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[domain_ids[i]].push_back(i);
  for (const auto& [d, idx] : groups) {
    if (!state.has_domain(d)) throw LookupError("no normalization branch for domain " + std::to_string(d));
    if (mode == Mode::train && idx.size() < 2) {
      throw DegenerateBatchError("domain " + std::to_string(d) + " has a single sample in a train-mode batch");
    }
  }
  if (groups.size() == 1) return branch_forward(bind, x, state.branch(groups.begin()->first), mode, rectify);

  std::vector<Var> parts;
  std::vector<std::size_t> order;
  for (const auto& [d, idx] : groups) {
    parts.push_back(branch_forward(bind, index_rows(x, idx), state.branch(d), mode, rectify));
    order.insert(order.end(), idx.begin(), idx.end());
  }
  std::vector<std::size_t> inverse(n);
  for (std::size_t k = 0; k < n; ++k) inverse[order[k]] = k;
  return index_rows(concat_rows(parts), inverse);
}

BranchNormalizer::BranchNormalizer(RdsbnState& state, int domain, bool rectify)
    : state_(&state), domain_(domain), rectify_(rectify) {
  if (!state.has_domain(domain)) throw LookupError("no normalization branch for domain " + std::to_string(domain));
}

Var BranchNormalizer::apply(Binder& bind, const Var& x) const {
  check_batch(x, state_->channels());
  return branch_forward(bind, x, state_->branch(domain_), Mode::eval, rectify_);
}

BranchNormalizer eval_branch_select(RdsbnState& state, int target_domain, bool rectify) {
  return BranchNormalizer(state, target_domain, rectify);
}

const char* to_string(NormKind kind) {
  switch (kind) {
    case NormKind::bn: return "bn";
    case NormKind::dsbn: return "dsbn";
    case NormKind::rdsbn: return "rdsbn";
  }
  return "?";
}

NormKind parse_norm_kind(const std::string& s) {
  if (s == "bn") return NormKind::bn;
  if (s == "dsbn") return NormKind::dsbn;
  if (s == "rdsbn") return NormKind::rdsbn;
  throw ConfigError("unknown normalization kind '" + s + "' (expected bn, dsbn or rdsbn)");
}

NormLayer::NormLayer(NormKind kind, std::size_t channels, std::size_t rank, double eps, double momentum)
    : kind_(kind), state_(channels, rank, eps, momentum) {
  if (kind_ == NormKind::bn) state_.add_domain(0);
}

void NormLayer::add_domain(int domain) {
  if (kind_ != NormKind::bn) state_.add_domain(domain);
}

Var NormLayer::forward(Binder& bind, const Var& x, std::span<const int> domain_ids, Mode mode) {
  if (kind_ == NormKind::bn) {
    std::vector<int> shared(domain_ids.size(), 0);
    return rdsbn_forward(bind, x, shared, state_, mode, false);
  }
  return rdsbn_forward(bind, x, domain_ids, state_, mode, kind_ == NormKind::rdsbn);
}

Var NormLayer::forward_branch(Binder& bind, const Var& x, int domain) {
  return eval_branch_select(state_, branch_for(domain), kind_ == NormKind::rdsbn).apply(bind, x);
}

}  // namespace damix::norm
