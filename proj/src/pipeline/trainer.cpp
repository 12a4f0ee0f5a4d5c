#include "damix/pipeline/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "damix/errors.hpp"
#include "damix/numerics/random.hpp"

namespace damix::pipeline {

double StageConfig::lr_at(std::size_t epoch) const {
  double lr = adam.lr;
  for (std::size_t m : milestones) {
    if (epoch >= m) lr *= gamma;
  }
  return lr;
}

void StageConfig::validate() const {
  if (iters_per_epoch == 0 && epochs > 0) throw ConfigError("iters_per_epoch must be positive");
  if (!(adam.lr >= 0.0) || !(adam.weight_decay >= 0.0)) throw ConfigError("learning rate and weight decay must be >= 0");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in [0,1)");
  }
  if (!(gamma > 0.0)) throw ConfigError("lr decay factor must be positive");
  if (plan.identities_per_domain == 0 || plan.samples_per_identity == 0) throw ConfigError("batch plan must be non-empty");
  if (plan.identities_per_domain < 2) throw ConfigError("batch plan needs P >= 2 so every anchor has a negative");
  if (plan.samples_per_identity < 2) throw ConfigError("batch plan needs R >= 2 so every anchor has a positive");
  if (!(margin >= 0.0)) throw ConfigError("triplet margin must be >= 0");
}

namespace {

Tensor stack_rows(const std::vector<Tensor>& parts) {
  std::size_t n = 0;
  for (const Tensor& p : parts) n += p.extent(0);
  Shape s = parts.front().shape();
  s[0] = n;
  Tensor out(s);
  std::size_t at = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(at));
    at += p.size();
  }
  return out;
}

std::size_t label_count(const DomainDataset& ds) {
  int hi = -1;
  for (int l : ds.labels) hi = std::max(hi, l);
  return static_cast<std::size_t>(hi + 1);
}

double column_norm_mean(const Tensor& w, std::size_t cols) {
  if (cols == 0) return 1.0;
  double acc = 0.0;
  for (std::size_t k = 0; k < cols; ++k) {
    double s = 0.0;
    for (std::size_t c = 0; c < w.extent(0); ++c) s += w.at(c, k) * w.at(c, k);
    acc += std::sqrt(s);
  }
  return acc / static_cast<double>(cols);
}

// Keeps the first `keep` columns of `old` and fills the rest with unit
// cluster centroids of `features`, scaled to the mean kept column norm.
Classifier rebuild_head(const Classifier& old, std::size_t keep, std::size_t total, const Tensor& features,
                        std::span<const int> labels) {
  const std::size_t c = features.extent(1);
  Classifier head{Tensor({c, total}, 0.0), Tensor({1, total}, 0.0)};
  for (std::size_t k = 0; k < keep; ++k) {
    for (std::size_t i = 0; i < c; ++i) head.weight.at(i, k) = old.weight.at(i, k);
    head.bias[k] = old.bias[k];
  }
  const double scale = column_norm_mean(old.weight, keep);
  const std::size_t clusters = total - keep;
  std::vector<double> centroid(clusters * c, 0.0);
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n] < 0) continue;
    for (std::size_t i = 0; i < c; ++i) centroid[static_cast<std::size_t>(labels[n]) * c + i] += features.at(n, i);
  }
  for (std::size_t k = 0; k < clusters; ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < c; ++i) s += centroid[k * c + i] * centroid[k * c + i];
    const double inv = s > 0.0 ? scale / std::sqrt(s) : 0.0;
    for (std::size_t i = 0; i < c; ++i) head.weight.at(i, keep + k) = centroid[k * c + i] * inv;
  }
  return head;
}

}  // namespace

EvalOutcome evaluate_model(ReidModel& model, const RetrievalSplit& split, std::span<const DomainDataset> domains,
                           bool per_sample_variance) {
  EvalOutcome out;
  const bool fused = model.fusion_active();
  const Tensor q = model.extract(split.query, split.domain, fused);
  const Tensor g = model.extract(split.gallery, split.domain, fused);
  out.retrieval = eval::evaluate_retrieval(q, split.query_ids, g, split.gallery_ids, {.l2_normalize = true});
  if (!domains.empty()) {
    std::vector<Tensor> parts;
    std::vector<int> ids, identities;
    for (const DomainDataset& ds : domains) {
      parts.push_back(cluster::l2_normalize_rows(model.extract(ds.inputs, ds.domain, fused)));
      ids.insert(ids.end(), ds.size(), ds.domain);
      identities.insert(identities.end(), ds.identities.begin(), ds.identities.end());
    }
    out.gap = eval::domain_gap_report(stack_rows(parts), ids, identities, per_sample_variance);
  }
  return out;
}

obj::LossBundle batch_loss(ReidModel& model, Binder& bind, const DomainBatch& batch, const obj::LabelSpace& space,
                           obj::Stage stage, double margin) {
  ForwardOutput out = model.forward(bind, batch.inputs, batch.domain_ids, Mode::train);

  const std::size_t n = batch.size();
  std::vector<int> global(n);
  auto mask = std::make_unique<bool[]>(n);
  std::vector<std::size_t> labeled;
  for (std::size_t i = 0; i < n; ++i) {
    global[i] = space.global(batch.domain_ids[i], batch.labels[i]);
    mask[i] = global[i] < 0;
    if (global[i] >= 0) labeled.push_back(i);
  }
  const std::span<const bool> ignore(mask.get(), n);

  obj::LossParts parts;
  if (!labeled.empty()) {
    parts.id = obj::id_loss(out.logits, global, ignore);
    if (stage == obj::Stage::adapt) {
      if (!out.fused_logits) throw CompositionError("adapt stage needs the fusion head");
      parts.id_mdif = obj::id_loss(*out.fused_logits, global, ignore);
    }
  }
  if (labeled.size() == n) {
    parts.triplet = obj::triplet_loss(out.features, global, margin);
  } else {
    std::vector<int> sub;
    for (std::size_t i : labeled) sub.push_back(global[i]);
    parts.triplet = obj::triplet_loss(index_rows(out.features, labeled), sub, margin);
  }
  return obj::stage_loss(stage, parts);
}

obj::LossBundle train_step(ReidModel& model, const DomainBatch& batch, const obj::LabelSpace& space, obj::Stage stage,
                           double margin, const AdamConfig& adam, OptimizerState& optimizer) {
  const std::vector<NamedParam> params = model.trainable_parameters();
  Tape tape;
  Binder bind(tape, true);
  obj::LossBundle bundle = batch_loss(model, bind, batch, space, stage, margin);
  if (!std::isfinite(bundle.total)) {
    throw TrainingAbort("non-finite loss (id " + std::to_string(bundle.id_loss) + ", id_mdif " +
                        std::to_string(bundle.id_mdif_loss) + ", triplet " + std::to_string(bundle.triplet_loss) + ")");
  }
  tape.backward(bundle.total_var);
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (const NamedParam& p : params) grads.push_back(bind.grad(*p.value));
  adam_step(params, grads, optimizer, adam);
  return bundle;
}

void pretrain_stage(ReidModel& model, std::span<const DomainDataset> sources, const StageConfig& config,
                    std::uint64_t seed, TrainLog& log) {
  config.validate();
  if (sources.empty()) throw ConfigError("pretraining needs at least one source domain");
  if (model.fusion_active()) throw StateError("pretraining runs without the fusion head");
  obj::LabelSpace space;
  for (const DomainDataset& ds : sources) {
    if (ds.role != Role::source) throw ConfigError("pretraining domain " + std::to_string(ds.domain) + " is not a source");
    ds.validate();
    model.add_domain(ds.domain);
    space.set_domain(ds.domain, label_count(ds));
  }
  if (model.id_head().num_classes() != space.total()) {
    Rng rng(mix_seed(seed, 0x1d));
    Tensor rows({space.total(), model.config().hidden});
    for (double& v : rows.data()) v = 0.01 * rng.normal();
    model.id_head() = ReidModel::make_classifier(rows);
  }
  OptimizerState optimizer;
  std::uint64_t step = 0;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    AdamConfig adam = config.adam;
    adam.lr = config.lr_at(e);
    for (std::size_t it = 0; it < config.iters_per_epoch; ++it, ++step) {
      const DomainBatch batch = sample_batch(sources, config.plan, mix_seed(seed, step));
      const obj::LossBundle b = train_step(model, batch, space, obj::Stage::pretrain, config.margin, adam, optimizer);
      log.steps.push_back({"pretrain", e, it, adam.lr, b.id_loss, 0.0, b.triplet_loss, b.total});
    }
    log.epochs.push_back({"pretrain", e + 1, 0, 0, false, {}});
  }
}

void convert_for_adaptation(ReidModel& model, std::span<const DomainDataset> sources, const DomainDataset& target,
                            const BatchPlan& plan) {
  const ModelConfig& cfg = model.config();
  const int t = target.domain;
  model.add_domain(t);
  model.set_norm_kind(cfg.norm);
  if (cfg.norm != norm::NormKind::bn) {
    for (Block& blk : model.blocks()) {
      norm::DomainBranch& tb = blk.norm.state().branch(t);
      tb.bn.gamma.fill(0.0);
      tb.bn.beta.fill(0.0);
      for (const DomainDataset& s : sources) {
        const norm::DomainBranch& sb = blk.norm.state().branch(s.domain);
        for (std::size_t c = 0; c < tb.bn.gamma.size(); ++c) {
          tb.bn.gamma[c] += sb.bn.gamma[c] / static_cast<double>(sources.size());
          tb.bn.beta[c] += sb.bn.beta[c] / static_cast<double>(sources.size());
        }
      }
      tb.rectifier.fill(0.0);
      tb.bn.momentum = 1.0;  // calibration pass below stores full-set statistics
    }
    Tape tape;
    Binder bind(tape, false);
    std::vector<int> ids(target.size(), t);
    model.backbone(bind, tape.constant(target.inputs), ids, Mode::train);
    for (Block& blk : model.blocks()) blk.norm.state().branch(t).bn.momentum = cfg.bn_momentum;
  }
  if (cfg.use_mdif) {
    model.set_fusion_active(true);
    model.mdif() = graph::MdifParams::init(cfg.hidden, cfg.slope);
    graph::AgentRegistry& reg = model.agents();
    std::vector<const DomainDataset*> all;
    for (const DomainDataset& s : sources) all.push_back(&s);
    all.push_back(&target);
    for (const DomainDataset* ds : all) {
      Tape tape;
      Binder bind(tape, false);
      const Tensor f = model.extract(ds->inputs, ds->domain, false);
      const Tensor agent = graph::compute_agent(bind, tape.constant(f), reg).value();
      graph::update_agent(reg, ds->domain, agent, 1.0);
    }
    reg.reference_q = plan.per_domain();
  }
}

void adapt_stage(ReidModel& model, std::span<const DomainDataset> sources, DomainDataset& target,
                 const AdaptConfig& config, std::uint64_t seed, const EvalHooks& hooks, TrainLog& log) {
  config.stage.validate();
  const int t = target.domain;
  if (!model.agents().has_domain(t) && model.fusion_active()) throw StateError("adapt stage needs a converted model");
  const obj::Stage stage = model.fusion_active() ? obj::Stage::adapt : obj::Stage::pretrain;
  auto evaluate = [&](std::size_t epoch, int clusters, std::size_t noise) {
    EpochRecord rec{"adapt", epoch, clusters, noise, false, {}};
    if (hooks.split != nullptr) {
      rec.metrics = evaluate_model(model, *hooks.split, hooks.domains, hooks.per_sample_variance);
      rec.evaluated = true;
    }
    log.epochs.push_back(std::move(rec));
  };
  evaluate(0, 0, 0);

  OptimizerState optimizer;
  std::uint64_t step = 0;
  for (std::size_t e = 0; e < config.stage.epochs; ++e) {
    const Tensor feats = model.extract(target.inputs, t, false);
    const Tensor fused = model.fusion_active() ? model.extract(target.inputs, t, true) : feats;
    const Tensor& clustered = config.cluster_on_fused ? fused : feats;
    cluster::PseudoLabelAssignment a = cluster::generate_pseudo_labels(clustered, config.cluster, static_cast<int>(e + 1));
    target.labels = a.labels;
    if (a.all_noise) log.warnings.push_back("adapt epoch " + std::to_string(e + 1) + ": clustering found no clusters");

    obj::LabelSpace space;
    std::size_t source_total = 0;
    for (const DomainDataset& s : sources) {
      space.set_domain(s.domain, label_count(s));
      source_total += label_count(s);
    }
    space.set_domain(t, static_cast<std::size_t>(a.num_clusters));

    const std::size_t total = space.total();
    const Tensor unit = cluster::l2_normalize_rows(feats);
    const Tensor unit_fused = cluster::l2_normalize_rows(fused);
    model.id_head() = rebuild_head(model.id_head(), source_total, total, unit, a.labels);
    if (model.fusion_active()) {
      const Classifier& prev = model.fused_head().num_classes() >= source_total ? model.fused_head() : model.id_head();
      model.fused_head() = rebuild_head(prev, source_total, total, unit_fused, a.labels);
    }
    for (const char* name : {"id_head.weight", "id_head.bias", "fused_head.weight", "fused_head.bias"}) optimizer.reset(name);

    std::vector<DomainDataset> datasets(sources.begin(), sources.end());
    datasets.push_back(target);
    BatchPlan plan = config.stage.plan;
    std::vector<int> fallback;
    if (a.all_noise) {
      fallback.push_back(t);
    } else if (static_cast<std::size_t>(a.num_clusters) < plan.identities_per_domain) {
      plan.reuse_identities = true;
      log.warnings.push_back("adapt epoch " + std::to_string(e + 1) + ": " + std::to_string(a.num_clusters) +
                             " clusters, fewer than P; identities are reused");
    }
    AdamConfig adam = config.stage.adam;
    adam.lr = config.stage.lr_at(e);
    for (std::size_t it = 0; it < config.stage.iters_per_epoch; ++it, ++step) {
      const DomainBatch batch = sample_batch(datasets, plan, mix_seed(seed ^ 0xada7ull, step), fallback);
      const obj::LossBundle b = train_step(model, batch, space, stage, config.stage.margin, adam, optimizer);
      log.steps.push_back({"adapt", e, it, adam.lr, b.id_loss, b.id_mdif_loss, b.triplet_loss, b.total});
    }
    log.assignments.push_back(std::move(a));
    const auto& last = log.assignments.back();
    evaluate(e + 1, last.num_clusters, last.noise_count());
  }
}

}  // namespace damix::pipeline
