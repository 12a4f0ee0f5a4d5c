#include "damix/graph_fusion.hpp"

#include <cmath>

#include "damix/errors.hpp"

namespace damix::graph {

AgentRegistry::AgentRegistry(std::size_t channels, double momentum)
    : head_weight({channels, 1}, 0.0), head_bias({1, 1}, 1.0), channels_(channels), momentum_(momentum) {
  if (channels == 0) throw ConfigError("agent registry needs at least one channel");
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw ConfigError("agent momentum must lie in [0,1]");
}

void AgentRegistry::add_domain(int domain) {
  entries_.try_emplace(domain, AgentEntry{Tensor({channels_}, 0.0), 0});
}

const AgentEntry& AgentRegistry::entry(int domain) const {
  auto it = entries_.find(domain);
  if (it == entries_.end()) throw LookupError("no agent registered for domain " + std::to_string(domain));
  return it->second;
}

AgentEntry& AgentRegistry::entry(int domain) {
  auto it = entries_.find(domain);
  if (it == entries_.end()) throw LookupError("no agent registered for domain " + std::to_string(domain));
  return it->second;
}

std::vector<int> AgentRegistry::domains() const {
  std::vector<int> out;
  for (const auto& [d, e] : entries_) out.push_back(d);
  return out;
}

bool AgentRegistry::populated() const {
  if (entries_.empty()) return false;
  for (const auto& [d, e] : entries_) {
    if (e.step == 0) return false;
  }
  return true;
}

void AgentRegistry::save(TensorArchive& archive, const std::string& prefix) const {
  archive.put(prefix + ".config",
              Tensor::vector({static_cast<double>(channels_), momentum_, static_cast<double>(reference_q)}));
  archive.put(prefix + ".head_weight", head_weight);
  archive.put(prefix + ".head_bias", head_bias);
  std::vector<double> ids;
  for (const auto& [d, e] : entries_) {
    ids.push_back(d);
    archive.put(prefix + ".d" + std::to_string(d) + ".agent", e.agent);
    archive.put(prefix + ".d" + std::to_string(d) + ".step", Tensor::scalar(static_cast<double>(e.step)));
  }
  if (!ids.empty()) archive.put(prefix + ".domains", Tensor::vector(ids));
}

AgentRegistry AgentRegistry::load(const TensorArchive& archive, const std::string& prefix) {
  const Tensor& cfg = archive.get(prefix + ".config");
  AgentRegistry r(static_cast<std::size_t>(cfg[0]), cfg[1]);
  r.reference_q = static_cast<std::size_t>(cfg[2]);
  r.head_weight = archive.get(prefix + ".head_weight");
  r.head_bias = archive.get(prefix + ".head_bias");
  if (archive.contains(prefix + ".domains")) {
    for (double dv : archive.get(prefix + ".domains").data()) {
      const int d = static_cast<int>(dv);
      r.entries_[d] = AgentEntry{archive.get(prefix + ".d" + std::to_string(d) + ".agent"),
                                 static_cast<std::int64_t>(archive.get(prefix + ".d" + std::to_string(d) + ".step").item())};
    }
  }
  return r;
}

Var compute_agent(const Var& features, const Var& head_weight, const Var& head_bias) {
  const Shape& s = features.shape();
  if (s.size() != 2 || s[0] == 0) throw DimensionError("compute_agent expects Q x C features, got " + shape_to_string(s));
  Var logits = matmul(features, head_weight) + head_bias;  // Q x 1
  Var total = sum(logits, {0}, true);                       // 1 x 1
  if (total.value()[0] == 0.0) throw NumericError("agent weight logits sum to zero");
  Var weights = logits / total;
  return sum(features * weights, {0});
}

Var compute_agent(Binder& bind, const Var& features, const AgentRegistry& registry) {
  return compute_agent(features, bind(registry.head_weight), bind(registry.head_bias));
}

void update_agent(AgentRegistry& registry, int domain, const Tensor& batch_agent, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("agent momentum must lie in [0,1], got " + std::to_string(alpha));
  AgentEntry& e = registry.entry(domain);
  if (batch_agent.shape() != e.agent.shape()) {
    throw DimensionError("batch agent " + shape_to_string(batch_agent.shape()) + " does not match stored " +
                         shape_to_string(e.agent.shape()));
  }
  for (std::size_t c = 0; c < e.agent.size(); ++c) e.agent[c] = (1.0 - alpha) * e.agent[c] + alpha * batch_agent[c];
  ++e.step;
}

Tensor normalize_adjacency(const Tensor& a) {
  const std::size_t n = a.extent(0);
  std::vector<double> degree(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) degree[i] += a.at(i, j);
    if (!(degree[i] > 0.0)) throw NumericError("graph node " + std::to_string(i) + " has zero degree");
  }
  // a_ij / sqrt(d_i d_j): a single rounding, so equal degrees give exactly a_ij / d.
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = a.at(i, j) / std::sqrt(degree[i] * degree[j]);
  return out;
}

GraphSpec build_adjacency(std::size_t num_domains, std::size_t per_domain, int layer) {
  if (num_domains == 0) throw ConfigError("graph needs at least one domain");
  if (layer != 1 && layer != 2) throw ConfigError("graph layer must be 1 or 2");
  GraphSpec g;
  g.num_domains = num_domains;
  g.per_domain = per_domain;
  g.layer = layer;
  const std::size_t n = g.num_nodes();
  g.adjacency = Tensor({n, n}, 0.0);
  for (std::size_t i = 0; i < n; ++i) g.adjacency.at(i, i) = 1.0;
  for (std::size_t d = 0; d < num_domains; ++d)
    for (std::size_t e = 0; e < num_domains; ++e) g.adjacency.at(g.agent_node(d), g.agent_node(e)) = 1.0;
  if (layer == 2) {
    for (std::size_t d = 0; d < num_domains; ++d) {
      for (std::size_t q = 0; q < per_domain; ++q) {
        const std::size_t i = d * per_domain + q;
        g.adjacency.at(i, g.agent_node(d)) = 1.0;
        g.adjacency.at(g.agent_node(d), i) = 1.0;
      }
    }
  }
  g.normalized = normalize_adjacency(g.adjacency);
  return g;
}

Var gcn_layer(const Var& h, const GraphSpec& spec, const Var& weight, double slope) {
  const std::size_t n = spec.num_nodes();
  if (h.shape().size() != 2 || h.shape()[0] != n) {
    throw DimensionError("gcn_layer: node features " + shape_to_string(h.shape()) + " for a graph of " +
                         std::to_string(n) + " nodes");
  }
  if (weight.shape().size() != 2 || weight.shape()[0] != h.shape()[1]) {
    throw DimensionError("gcn_layer: weight " + shape_to_string(weight.shape()) + " does not fit features " +
                         shape_to_string(h.shape()));
  }
  Var a = h.tape().constant(spec.normalized);
  return leaky_relu(matmul(matmul(a, h), weight), slope);
}

MdifParams MdifParams::init(std::size_t channels, double slope) {
  return {Tensor::identity(channels), Tensor({channels, channels}, 0.0), slope};
}

MdifParams MdifParams::zeros(std::size_t channels, double slope) {
  return {Tensor({channels, channels}, 0.0), Tensor({channels, channels}, 0.0), slope};
}

namespace {

void check_params(const MdifParams& p, std::size_t c) {
  const Shape want{c, c};
  if (p.w1.shape() != want || p.w2.shape() != want) {
    throw DimensionError("MDIF weights must be " + shape_to_string(want) + ", got " + shape_to_string(p.w1.shape()) +
                         " and " + shape_to_string(p.w2.shape()));
  }
}

Var mdif_train(Binder& bind, const Var& h0, std::span<const int> domain_ids, const MdifParams& params,
               AgentRegistry& registry) {
  const std::size_t n = h0.shape()[0];
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[domain_ids[i]].push_back(i);
  const std::size_t q = groups.begin()->second.size();
  for (const auto& [d, idx] : groups) {
    if (!registry.has_domain(d)) throw LookupError("no agent registered for domain " + std::to_string(d));
    if (idx.size() != q) {
      throw DimensionError("train-mode fusion needs equal samples per domain; domain " + std::to_string(d) + " has " +
                           std::to_string(idx.size()) + ", expected " + std::to_string(q));
    }
  }
  const std::size_t num_domains = groups.size();

  std::vector<std::size_t> order;
  std::vector<Var> agents;
  std::vector<int> ids;
  for (const auto& [d, idx] : groups) {
    order.insert(order.end(), idx.begin(), idx.end());
    agents.push_back(reshape(compute_agent(bind, index_rows(h0, idx), registry), {1, registry.channels()}));
    ids.push_back(d);
  }
  std::vector<Var> nodes{index_rows(h0, order)};
  nodes.insert(nodes.end(), agents.begin(), agents.end());
  Var h = concat_rows(nodes);

  const GraphSpec g1 = build_adjacency(num_domains, q, 1);
  const GraphSpec g2 = build_adjacency(num_domains, q, 2);
  Var h1 = gcn_layer(h, g1, bind(params.w1), params.slope);
  Var h2 = gcn_layer(h1, g2, bind(params.w2), params.slope);

  for (std::size_t k = 0; k < ids.size(); ++k) {
    AgentEntry& e = registry.entry(ids[k]);
    const Tensor batch_agent = agents[k].value().reshaped({registry.channels()});
    update_agent(registry, ids[k], batch_agent, e.step == 0 ? 1.0 : registry.momentum());
  }
  registry.reference_q = q;

  // Instance rows of h2 back to input order.
  std::vector<std::size_t> inverse(n);
  for (std::size_t k = 0; k < n; ++k) inverse[order[k]] = k;
  return h0 + index_rows(h2, inverse);
}

Var mdif_eval(Binder& bind, const Var& h0, std::span<const int> domain_ids, const MdifParams& params,
              const AgentRegistry& registry) {
  if (!registry.populated()) throw StateError("agent registry has not been populated by training");
  Tape& tape = h0.tape();
  const std::size_t c = registry.channels();
  const std::vector<int> domains = registry.domains();
  const std::size_t num_domains = domains.size();
  std::map<int, std::size_t> slot;
  std::vector<double> agent_data;
  for (std::size_t k = 0; k < num_domains; ++k) {
    slot[domains[k]] = k;
    const Tensor& a = registry.entry(domains[k]).agent;
    agent_data.insert(agent_data.end(), a.data().begin(), a.data().end());
  }
  std::vector<std::size_t> agent_of(domain_ids.size());
  for (std::size_t i = 0; i < domain_ids.size(); ++i) {
    auto it = slot.find(domain_ids[i]);
    if (it == slot.end()) throw LookupError("no agent registered for domain " + std::to_string(domain_ids[i]));
    agent_of[i] = it->second;
  }

  Var w1 = bind(params.w1);
  Var w2 = bind(params.w2);
  // Layer 1: agents form a clique; instances only see themselves.
  Var agents = tape.constant(Tensor({num_domains, c}, std::move(agent_data)));
  const GraphSpec clique = build_adjacency(num_domains, 0, 1);
  Var agents1 = gcn_layer(agents, clique, w1, params.slope);
  Var inst1 = leaky_relu(matmul(h0, w1), params.slope);

  // Layer 2: instance degree 2 (self + own agent); agent degree counts the
  // other agents plus the reference number of attached instances.
  const double agent_degree = static_cast<double>(num_domains + std::max<std::size_t>(registry.reference_q, 1));
  const double self_w = 1.0 / 2.0;
  const double cross_w = 1.0 / std::sqrt(2.0 * agent_degree);
  Var mixed = inst1 * self_w + index_rows(agents1, agent_of) * cross_w;
  Var h2 = leaky_relu(matmul(mixed, w2), params.slope);
  return h0 + h2;
}

}  // namespace

Var mdif_forward(Binder& bind, const Var& h0, std::span<const int> domain_ids, const MdifParams& params,
                 AgentRegistry& registry, Mode mode) {
  const Shape& s = h0.shape();
  if (s.size() != 2 || s[1] != registry.channels()) {
    throw DimensionError("mdif_forward expects N x " + std::to_string(registry.channels()) + " features, got " +
                         shape_to_string(s));
  }
  if (domain_ids.size() != s[0]) throw DimensionError("domain tag count does not match feature rows");
  check_params(params, s[1]);
  return mode == Mode::train ? mdif_train(bind, h0, domain_ids, params, registry)
                             : mdif_eval(bind, h0, domain_ids, params, registry);
}

}  // namespace damix::graph
