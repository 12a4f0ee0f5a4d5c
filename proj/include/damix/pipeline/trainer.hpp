#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "damix/clustering.hpp"
#include "damix/evaluation.hpp"
#include "damix/objectives.hpp"
#include "damix/pipeline/dataset.hpp"
#include "damix/pipeline/model.hpp"
#include "damix/pipeline/optimizer.hpp"
#include "damix/pipeline/synthetic.hpp"

namespace damix::pipeline {

struct StageConfig {
  std::size_t epochs = 80;
  std::size_t iters_per_epoch = 20;
  AdamConfig adam;
  /// Epochs at whose start the learning rate is multiplied by `gamma`.
  std::vector<std::size_t> milestones;
  double gamma = 0.1;
  BatchPlan plan;
  double margin = 0.3;

  double lr_at(std::size_t epoch) const;
  void validate() const;
};

struct AdaptConfig {
  StageConfig stage;
  cluster::ClusterConfig cluster;
  /// Cluster the fused target features (when the fusion head is active)
  /// instead of the backbone features.
  bool cluster_on_fused = false;
};

struct StepRecord {
  std::string stage;
  std::size_t epoch = 0;
  std::size_t iter = 0;
  double lr = 0.0;
  double id = 0.0;
  double id_mdif = 0.0;
  double triplet = 0.0;
  double total = 0.0;
};

struct EvalOutcome {
  eval::RetrievalResult retrieval;
  eval::DomainGapReport gap;
};

struct EpochRecord {
  std::string stage;
  std::size_t epoch = 0;
  int num_clusters = 0;
  std::size_t noise = 0;
  bool evaluated = false;
  EvalOutcome metrics;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::vector<cluster::PseudoLabelAssignment> assignments;
  std::vector<std::string> warnings;
};

/// Optional evaluation hooks run after every adapt epoch (and once before
/// the first). `domains` feed the domain-gap diagnostics.
struct EvalHooks {
  const RetrievalSplit* split = nullptr;
  std::span<const DomainDataset> domains;
  bool per_sample_variance = false;
};

/// Retrieval on the split (target branch, fused features when active, L2
/// normalized) and domain-gap diagnostics on L2-normalized features of
/// each domain through its own branch. Pure with respect to the model.
EvalOutcome evaluate_model(ReidModel& model, const RetrievalSplit& split, std::span<const DomainDataset> domains,
                           bool per_sample_variance = false);

/// Train-mode forward of `batch` and the stage's loss composition. Rows
/// labeled -1 are left out of every term.
obj::LossBundle batch_loss(ReidModel& model, Binder& bind, const DomainBatch& batch, const obj::LabelSpace& space,
                           obj::Stage stage, double margin);

/// One optimizer step. Returns the loss values; throws TrainingAbort when
/// the loss is not finite.
obj::LossBundle train_step(ReidModel& model, const DomainBatch& batch, const obj::LabelSpace& space, obj::Stage stage,
                           double margin, const AdamConfig& adam, OptimizerState& optimizer);

/// Supervised training on the labeled sources with DSBN (or BN) branches.
void pretrain_stage(ReidModel& model, std::span<const DomainDataset> sources, const StageConfig& config,
                    std::uint64_t seed, TrainLog& log);

/// Prepares a pretrained model for adaptation: adds the target branch
/// (affine parameters averaged over the sources, running statistics
/// calibrated on the target data), switches to the configured norm kind
/// with zero rectifiers, and when fusion is enabled installs the fusion
/// head and seeds every domain's agent from its full dataset.
void convert_for_adaptation(ReidModel& model, std::span<const DomainDataset> sources, const DomainDataset& target,
                            const BatchPlan& plan);

/// Pseudo-label adaptation on sources + target. `target` labels are
/// overwritten with the pseudo-labels of the last epoch.
void adapt_stage(ReidModel& model, std::span<const DomainDataset> sources, DomainDataset& target,
                 const AdaptConfig& config, std::uint64_t seed, const EvalHooks& hooks, TrainLog& log);

}  // namespace damix::pipeline
