#include "damix/pipeline/model.hpp"

#include <algorithm>
#include <cmath>

#include "damix/errors.hpp"
#include "damix/numerics/random.hpp"

namespace damix::pipeline {

void ModelConfig::validate() const {
  if (in_channels == 0 || hidden == 0) throw ConfigError("model channels must be positive");
  if (blocks == 0) throw ConfigError("model needs at least one block");
  if (rectifier_rank == 0) throw ConfigError("rectifier rank must be at least 1");
  if (!(bn_eps > 0.0)) throw ConfigError("bn eps must be positive");
  if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0)) throw ConfigError("bn momentum must lie in [0,1]");
  if (!(agent_momentum >= 0.0 && agent_momentum <= 1.0)) throw ConfigError("agent momentum must lie in [0,1]");
}

ReidModel::ReidModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  std::size_t fan_in = config_.in_channels;
  // Stage 1 trains plain DSBN; the rectifier switches on at adaptation.
  const norm::NormKind initial = config_.norm == norm::NormKind::bn ? norm::NormKind::bn : norm::NormKind::dsbn;
  for (std::size_t b = 0; b < config_.blocks; ++b) {
    Block blk;
    blk.weight = Tensor({fan_in, config_.hidden});
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& w : blk.weight.data()) w = std_dev * rng.normal();
    blk.bias = Tensor({1, config_.hidden}, 0.0);
    blk.norm = norm::NormLayer(initial, config_.hidden, config_.rectifier_rank, config_.bn_eps, config_.bn_momentum);
    blocks_.push_back(std::move(blk));
    fan_in = config_.hidden;
  }
  mdif_ = graph::MdifParams::init(config_.hidden, config_.slope);
  agents_ = graph::AgentRegistry(config_.hidden, config_.agent_momentum);
}

void ReidModel::add_domain(int domain) {
  if (std::find(domains_.begin(), domains_.end(), domain) != domains_.end()) return;
  domains_.push_back(domain);
  std::sort(domains_.begin(), domains_.end());
  for (Block& b : blocks_) b.norm.add_domain(domain);
  agents_.add_domain(domain);
}

void ReidModel::set_norm_kind(norm::NormKind kind) {
  for (Block& b : blocks_) b.norm.set_kind(kind);
}

void ReidModel::set_variant(norm::NormKind kind, bool use_mdif) {
  if ((kind == norm::NormKind::bn) != (config_.norm == norm::NormKind::bn)) {
    throw ConfigError("a BN model and a domain-specific model are not interchangeable");
  }
  config_.norm = kind;
  config_.use_mdif = use_mdif;
}

namespace {

Var affine_over_channels(Binder& bind, const Var& x, const Block& blk) {
  const std::size_t n = x.shape()[0], c = x.shape()[1], l = x.shape()[2];
  const std::size_t out = blk.weight.extent(1);
  Var rows = reshape(swap_last_axes(x), {n * l, c});
  Var y = matmul(rows, bind(blk.weight)) + bind(blk.bias);
  return swap_last_axes(reshape(y, {n, l, out}));
}

Var classify(Binder& bind, const Var& f, const Classifier& head) {
  return matmul(f, bind(head.weight)) + bind(head.bias);
}

}  // namespace

Var ReidModel::backbone(Binder& bind, const Var& x, std::span<const int> domain_ids, Mode mode) {
  if (x.shape().size() != 3 || x.shape()[1] != config_.in_channels) {
    throw DimensionError("model expects N x " + std::to_string(config_.in_channels) + " x L input, got " +
                         shape_to_string(x.shape()));
  }
  Var h = x;
  for (Block& blk : blocks_) {
    h = leaky_relu(blk.norm.forward(bind, affine_over_channels(bind, h, blk), domain_ids, mode), config_.slope);
  }
  return mean(h, {2});
}

Var ReidModel::backbone_branch(Binder& bind, const Var& x, int domain) {
  Var h = x;
  for (Block& blk : blocks_) {
    h = leaky_relu(blk.norm.forward_branch(bind, affine_over_channels(bind, h, blk), domain), config_.slope);
  }
  return mean(h, {2});
}

ForwardOutput ReidModel::forward(Binder& bind, const Tensor& inputs, std::span<const int> domain_ids, Mode mode) {
  ForwardOutput out;
  Var x = bind.tape().constant(inputs);
  out.features = backbone(bind, x, domain_ids, mode);
  if (id_head_.num_classes() > 0) out.logits = classify(bind, out.features, id_head_);
  if (fusion_active_) {
    out.fused = graph::mdif_forward(bind, out.features, domain_ids, mdif_, agents_, mode);
    if (fused_head_.num_classes() > 0) out.fused_logits = classify(bind, *out.fused, fused_head_);
  }
  return out;
}

Tensor ReidModel::extract(const Tensor& inputs, int domain, bool fused) {
  Tape tape;
  Binder bind(tape, false);
  Var f = backbone_branch(bind, tape.constant(inputs), domain);
  if (fused && fusion_active_) {
    std::vector<int> ids(inputs.extent(0), domain);
    f = graph::mdif_forward(bind, f, ids, mdif_, agents_, Mode::eval);
  }
  return f.value();
}

Classifier ReidModel::make_classifier(const Tensor& rows) {
  Classifier c;
  c.weight = transpose(rows);
  c.bias = Tensor({1, rows.extent(0)}, 0.0);
  return c;
}

std::vector<NamedParam> ReidModel::trainable_parameters() {
  std::vector<NamedParam> out;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    Block& blk = blocks_[b];
    const std::string p = "block" + std::to_string(b);
    out.push_back({p + ".weight", &blk.weight});
    out.push_back({p + ".bias", &blk.bias});
    for (int d : blk.norm.state().domains()) {
      norm::DomainBranch& br = blk.norm.state().branch(d);
      const std::string q = p + ".norm.d" + std::to_string(d);
      out.push_back({q + ".gamma", &br.bn.gamma});
      out.push_back({q + ".beta", &br.bn.beta});
      if (blk.norm.kind() == norm::NormKind::rdsbn) out.push_back({q + ".rectifier", &br.rectifier});
    }
  }
  if (id_head_.num_classes() > 0) {
    out.push_back({"id_head.weight", &id_head_.weight});
    out.push_back({"id_head.bias", &id_head_.bias});
  }
  if (fusion_active_) {
    out.push_back({"mdif.w1", &mdif_.w1});
    out.push_back({"mdif.w2", &mdif_.w2});
    out.push_back({"agents.head_weight", &agents_.head_weight});
    out.push_back({"agents.head_bias", &agents_.head_bias});
    if (fused_head_.num_classes() > 0) {
      out.push_back({"fused_head.weight", &fused_head_.weight});
      out.push_back({"fused_head.bias", &fused_head_.bias});
    }
  }
  return out;
}

void ReidModel::save(TensorArchive& archive) const {
  archive.set_meta("model.norm", norm::to_string(config_.norm));
  archive.set_meta("model.use_mdif", config_.use_mdif ? "1" : "0");
  archive.set_meta("model.fusion_active", fusion_active_ ? "1" : "0");
  archive.put("model.config", Tensor::vector({static_cast<double>(config_.in_channels), static_cast<double>(config_.hidden),
                                              static_cast<double>(config_.blocks), static_cast<double>(config_.rectifier_rank),
                                              config_.slope, config_.bn_eps, config_.bn_momentum, config_.agent_momentum}));
  std::vector<double> doms(domains_.begin(), domains_.end());
  if (!doms.empty()) archive.put("model.domains", Tensor::vector(doms));
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const std::string p = "block" + std::to_string(b);
    archive.put(p + ".weight", blocks_[b].weight);
    archive.put(p + ".bias", blocks_[b].bias);
    archive.set_meta(p + ".norm.kind", norm::to_string(blocks_[b].norm.kind()));
    blocks_[b].norm.state().save(archive, p + ".norm");
  }
  archive.put("mdif.w1", mdif_.w1);
  archive.put("mdif.w2", mdif_.w2);
  agents_.save(archive, "agents");
  if (id_head_.num_classes() > 0) {
    archive.put("id_head.weight", id_head_.weight);
    archive.put("id_head.bias", id_head_.bias);
  }
  if (fused_head_.num_classes() > 0) {
    archive.put("fused_head.weight", fused_head_.weight);
    archive.put("fused_head.bias", fused_head_.bias);
  }
}

ReidModel ReidModel::load(const TensorArchive& archive) {
  ReidModel m;
  const Tensor& cfg = archive.get("model.config");
  m.config_.in_channels = static_cast<std::size_t>(cfg[0]);
  m.config_.hidden = static_cast<std::size_t>(cfg[1]);
  m.config_.blocks = static_cast<std::size_t>(cfg[2]);
  m.config_.rectifier_rank = static_cast<std::size_t>(cfg[3]);
  m.config_.slope = cfg[4];
  m.config_.bn_eps = cfg[5];
  m.config_.bn_momentum = cfg[6];
  m.config_.agent_momentum = cfg[7];
  m.config_.norm = norm::parse_norm_kind(archive.meta("model.norm"));
  m.config_.use_mdif = archive.meta("model.use_mdif") == "1";
  m.fusion_active_ = archive.meta("model.fusion_active") == "1";
  m.config_.validate();
  if (archive.contains("model.domains")) {
    for (double d : archive.get("model.domains").data()) m.domains_.push_back(static_cast<int>(d));
  }
  for (std::size_t b = 0; b < m.config_.blocks; ++b) {
    const std::string p = "block" + std::to_string(b);
    Block blk;
    blk.weight = archive.get(p + ".weight");
    blk.bias = archive.get(p + ".bias");
    blk.norm = norm::NormLayer(norm::parse_norm_kind(archive.meta(p + ".norm.kind")), m.config_.hidden,
                               m.config_.rectifier_rank, m.config_.bn_eps, m.config_.bn_momentum);
    blk.norm.state() = norm::RdsbnState::load(archive, p + ".norm");
    m.blocks_.push_back(std::move(blk));
  }
  m.mdif_ = graph::MdifParams{archive.get("mdif.w1"), archive.get("mdif.w2"), m.config_.slope};
  m.agents_ = graph::AgentRegistry::load(archive, "agents");
  if (archive.contains("id_head.weight")) m.id_head_ = {archive.get("id_head.weight"), archive.get("id_head.bias")};
  if (archive.contains("fused_head.weight")) {
    m.fused_head_ = {archive.get("fused_head.weight"), archive.get("fused_head.bias")};
  }
  return m;
}

}  // namespace damix::pipeline
