#pragma once

#include <map>
#include <optional>
#include <span>
#include <vector>

#include "damix/numerics/tape.hpp"

namespace damix::obj {

/// Maps (domain, local id) to one global class index. Domain ranges are
/// disjoint and laid out in domain-id order.
class LabelSpace {
 public:
  /// Sets or replaces the number of identities of a domain; later domains
  /// shift accordingly.
  void set_domain(int domain, std::size_t num_ids);
  std::size_t num_ids(int domain) const;
  std::size_t offset(int domain) const;
  std::size_t total() const;
  /// Global index of a local id; -1 stays -1 (unlabeled).
  int global(int domain, int local) const;
  const std::map<int, std::size_t>& domains() const { return counts_; }

 private:
  std::map<int, std::size_t> counts_;
};

/// Mean over unmasked rows of -log softmax(logits)[label]. A mask entry of
/// true excludes that row; an empty mask includes every row.
/// Throws NumericError when every row is masked.
Var id_loss(const Var& logits, std::span<const int> labels, std::span<const bool> ignore_mask = {});

/// Batch-hard triplet loss: mean over anchors of
/// max(0, margin + max_pos d(a,p) - min_neg d(a,n)) with Euclidean d.
/// Throws SamplerContractError if some anchor lacks a positive or a negative.
Var triplet_loss(const Var& features, std::span<const int> labels, double margin = 0.3);

/// Euclidean distance matrix with a floor on the squared distance so the
/// square root stays differentiable on the diagonal.
Var pairwise_distances(const Var& features);

enum class Stage { pretrain, adapt };

struct LossParts {
  std::optional<Var> id;
  std::optional<Var> id_mdif;
  std::optional<Var> triplet;
};

struct LossBundle {
  double id_loss = 0.0;
  double id_mdif_loss = 0.0;
  double triplet_loss = 0.0;
  double total = 0.0;
  Var total_var;
};

/// pretrain: id + triplet. adapt: id + id_mdif + triplet.
/// An absent id term is allowed (all labels masked); the other terms of the
/// stage are required, and id_mdif is rejected in pretrain.
LossBundle stage_loss(Stage stage, const LossParts& parts);

}  // namespace damix::obj
