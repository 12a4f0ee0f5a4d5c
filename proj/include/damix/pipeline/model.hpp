#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "damix/graph_fusion.hpp"
#include "damix/normalization.hpp"
#include "damix/numerics/binding.hpp"
#include "damix/pipeline/optimizer.hpp"

namespace damix::pipeline {

struct ModelConfig {
  std::size_t in_channels = 8;
  std::size_t hidden = 32;  // feature dimension C
  std::size_t blocks = 3;
  std::size_t rectifier_rank = 1;
  double slope = 0.01;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
  double agent_momentum = 0.1;
  norm::NormKind norm = norm::NormKind::rdsbn;
  bool use_mdif = true;

  void validate() const;
};

/// 1x1 affine map over the channel axis of N x C x L, then normalization
/// and LeakyReLU.
struct Block {
  Tensor weight;  // [C_in, C_out]
  Tensor bias;    // [1, C_out]
  norm::NormLayer norm;
};

struct Classifier {
  Tensor weight;  // [C, K]
  Tensor bias;    // [1, K]
  std::size_t num_classes() const { return weight.rank() == 2 ? weight.extent(1) : 0; }
};

struct ForwardOutput {
  Var features;                // N x C, pooled backbone output
  std::optional<Var> fused;    // N x C after the fusion head
  Var logits;                  // id head on features
  std::optional<Var> fused_logits;
};

/// Backbone (blocks + global average pool), optional fusion head, and the
/// two identity classifiers over one global label space.
class ReidModel {
 public:
  ReidModel() = default;
  ReidModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  void add_domain(int domain);
  std::vector<int> domains() const { return domains_; }

  /// Pooled backbone features, N x C.
  Var backbone(Binder& bind, const Var& x, std::span<const int> domain_ids, Mode mode);
  /// Eval-mode backbone with every sample routed through `domain`'s branch.
  Var backbone_branch(Binder& bind, const Var& x, int domain);

  ForwardOutput forward(Binder& bind, const Tensor& inputs, std::span<const int> domain_ids, Mode mode);

  /// Eval features for inputs that all belong to `domain`: backbone through
  /// that branch, then the fusion head (when active) with the same tag.
  Tensor extract(const Tensor& inputs, int domain, bool fused);

  bool fusion_active() const { return fusion_active_; }
  void set_fusion_active(bool on) { fusion_active_ = on; }

  std::vector<Block>& blocks() { return blocks_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  graph::MdifParams& mdif() { return mdif_; }
  graph::AgentRegistry& agents() { return agents_; }
  const graph::AgentRegistry& agents() const { return agents_; }
  Classifier& id_head() { return id_head_; }
  Classifier& fused_head() { return fused_head_; }

  /// Sets the normalization kind of every block.
  void set_norm_kind(norm::NormKind kind);
  /// Changes the configured stage-2 variant; takes effect at conversion.
  void set_variant(norm::NormKind kind, bool use_mdif);

  /// Replaces a classifier's weights; columns given as K x C rows.
  static Classifier make_classifier(const Tensor& rows);

  /// Parameters the current configuration trains, with stable names.
  std::vector<NamedParam> trainable_parameters();

  void save(TensorArchive& archive) const;
  static ReidModel load(const TensorArchive& archive);

 private:
  ModelConfig config_;
  std::vector<int> domains_;
  std::vector<Block> blocks_;
  graph::MdifParams mdif_;
  graph::AgentRegistry agents_;
  Classifier id_head_;
  Classifier fused_head_;
  bool fusion_active_ = false;
};

}  // namespace damix::pipeline
