#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "damix/numerics/binding.hpp"
#include "damix/numerics/tape.hpp"
#include "damix/numerics/tensor_io.hpp"

namespace damix::graph {

struct AgentEntry {
  Tensor agent;  // [C]
  std::int64_t step = 0;
};

/// Per-domain agent vectors tracked by moving average, plus the scalar
/// weight head f(x) = x . w + b that mixes a domain's in-batch features.
class AgentRegistry {
 public:
  AgentRegistry() = default;
  /// Head starts at w = 0, b = 1, so the first agents are plain means.
  AgentRegistry(std::size_t channels, double momentum = 0.1);

  void add_domain(int domain);
  bool has_domain(int domain) const { return entries_.count(domain) != 0; }
  const AgentEntry& entry(int domain) const;
  AgentEntry& entry(int domain);
  std::vector<int> domains() const;
  /// True when every registered domain has received at least one update.
  bool populated() const;

  std::size_t channels() const { return channels_; }
  double momentum() const { return momentum_; }

  Tensor head_weight;  // [C, 1]
  Tensor head_bias;    // [1, 1]
  /// Instances per domain in the training graphs; sets the agent degree of
  /// the inference graph so its normalization matches training.
  std::size_t reference_q = 1;

  void save(TensorArchive& archive, const std::string& prefix) const;
  static AgentRegistry load(const TensorArchive& archive, const std::string& prefix);

 private:
  std::size_t channels_ = 0;
  double momentum_ = 0.1;
  std::map<int, AgentEntry> entries_;
};

/// agt = sum_n w_n x_n with w_n = f(x_n) / sum_m f(x_m).
/// Throws NumericError when the logits sum to exactly zero.
Var compute_agent(const Var& features, const Var& head_weight, const Var& head_bias);
Var compute_agent(Binder& bind, const Var& features, const AgentRegistry& registry);

/// stored <- (1 - alpha) stored + alpha batch_agent; step + 1.
void update_agent(AgentRegistry& registry, int domain, const Tensor& batch_agent, double alpha);

/// Fusion graph over D*Q instances followed by D agents.
struct GraphSpec {
  std::size_t num_domains = 0;
  std::size_t per_domain = 0;
  int layer = 1;
  Tensor adjacency;   // A with unit diagonal
  Tensor normalized;  // D^-1/2 A D^-1/2

  std::size_t num_nodes() const { return num_domains * per_domain + num_domains; }
  std::size_t agent_node(std::size_t domain_index) const { return num_domains * per_domain + domain_index; }
};

/// Layer 1 links only the agents (a clique); layer 2 additionally links each
/// instance to its own domain's agent. Self loops everywhere.
GraphSpec build_adjacency(std::size_t num_domains, std::size_t per_domain, int layer);

/// D^-1/2 A D^-1/2 for any adjacency with positive degrees.
Tensor normalize_adjacency(const Tensor& adjacency);

/// leaky_relu((A_norm H) W).
Var gcn_layer(const Var& h, const GraphSpec& spec, const Var& weight, double slope);

struct MdifParams {
  Tensor w1;  // [C, C]
  Tensor w2;  // [C, C]
  double slope = 0.01;

  /// w1 = I, w2 = 0: the residual is zero, and w2 still receives gradient.
  static MdifParams init(std::size_t channels, double slope = 0.01);
  static MdifParams zeros(std::size_t channels, double slope = 0.01);
};

/// Residual fusion H0 + H2 over an agent graph.
/// Train: instances are grouped by domain tag (equal counts required), agents
/// come from the current batch and the registry is updated with their
/// detached values. Eval: agents are read from the registry and every
/// instance is fused independently of the other instances in the batch.
Var mdif_forward(Binder& bind, const Var& h0, std::span<const int> domain_ids, const MdifParams& params,
                 AgentRegistry& registry, Mode mode);

}  // namespace damix::graph
