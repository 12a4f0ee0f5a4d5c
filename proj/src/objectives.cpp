#include "damix/objectives.hpp"

#include <limits>

#include "damix/errors.hpp"

namespace damix::obj {

void LabelSpace::set_domain(int domain, std::size_t num_ids) { counts_[domain] = num_ids; }

std::size_t LabelSpace::num_ids(int domain) const {
  auto it = counts_.find(domain);
  if (it == counts_.end()) throw LookupError("label space has no domain " + std::to_string(domain));
  return it->second;
}

std::size_t LabelSpace::offset(int domain) const {
  std::size_t off = 0;
  for (const auto& [d, n] : counts_) {
    if (d == domain) return off;
    off += n;
  }
  throw LookupError("label space has no domain " + std::to_string(domain));
}

std::size_t LabelSpace::total() const {
  std::size_t t = 0;
  for (const auto& [d, n] : counts_) t += n;
  return t;
}

int LabelSpace::global(int domain, int local) const {
  if (local < 0) return -1;
  if (static_cast<std::size_t>(local) >= num_ids(domain)) {
    throw LookupError("local id " + std::to_string(local) + " out of range for domain " + std::to_string(domain));
  }
  return static_cast<int>(offset(domain)) + local;
}

Var id_loss(const Var& logits, std::span<const int> labels, std::span<const bool> ignore_mask) {
  const Shape& s = logits.shape();
  if (s.size() != 2) throw DimensionError("id_loss expects N x K logits, got " + shape_to_string(s));
  const std::size_t n = s[0], k = s[1];
  if (labels.size() != n) throw DimensionError("id_loss: label count does not match logit rows");
  if (!ignore_mask.empty() && ignore_mask.size() != n) throw DimensionError("id_loss: mask length does not match rows");
  std::vector<std::size_t> picks;
  for (std::size_t i = 0; i < n; ++i) {
    if (!ignore_mask.empty() && ignore_mask[i]) continue;
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw LookupError("label " + std::to_string(labels[i]) + " outside [0," + std::to_string(k) + ")");
    }
    picks.push_back(i * k + static_cast<std::size_t>(labels[i]));
  }
  if (picks.empty()) throw NumericError("id_loss undefined: every sample is masked");
  return -mean_all(take(log_softmax(logits), picks));
}

Var pairwise_distances(const Var& features) {
  const Shape& s = features.shape();
  if (s.size() != 2) throw DimensionError("pairwise_distances expects N x C, got " + shape_to_string(s));
  const std::size_t n = s[0], c = s[1];
  Var diff = reshape(features, {n, 1, c}) - reshape(features, {1, n, c});
  return sqrt(clamp_min(sum(square(diff), {2}), 1e-12));
}

Var triplet_loss(const Var& features, std::span<const int> labels, double margin) {
  const std::size_t n = features.shape().at(0);
  if (labels.size() != n) throw DimensionError("triplet_loss: label count does not match feature rows");
  Var dist = pairwise_distances(features);
  const Tensor& d = dist.value();
  std::vector<std::size_t> pos_idx, neg_idx;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best_pos = n, best_neg = n;
    double pos = -std::numeric_limits<double>::infinity();
    double neg = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (labels[j] == labels[i]) {
        if (d.at(i, j) > pos) pos = d.at(i, j), best_pos = j;
      } else if (d.at(i, j) < neg) {
        neg = d.at(i, j), best_neg = j;
      }
    }
    if (best_pos == n || best_neg == n) {
      throw SamplerContractError("triplet anchor " + std::to_string(i) + " (label " + std::to_string(labels[i]) +
                                 ") lacks a positive or a negative in the batch");
    }
    pos_idx.push_back(i * n + best_pos);
    neg_idx.push_back(i * n + best_neg);
  }
  Var hinge = relu(take(dist, pos_idx) - take(dist, neg_idx) + margin);
  return mean_all(hinge);
}

LossBundle stage_loss(Stage stage, const LossParts& parts) {
  if (!parts.triplet) throw CompositionError("stage loss needs a triplet term");
  if (stage == Stage::pretrain && parts.id_mdif) {
    throw CompositionError("pretrain stage has no fusion head; id_mdif term is not allowed");
  }
  if (stage == Stage::adapt && !parts.id_mdif) throw CompositionError("adapt stage requires the id_mdif term");

  LossBundle b;
  std::optional<Var> total;
  auto accumulate = [&total](const Var& v) { total = total ? *total + v : v; };
  if (parts.id) {
    b.id_loss = parts.id->value().item();
    accumulate(*parts.id);
  }
  if (parts.id_mdif) {
    b.id_mdif_loss = parts.id_mdif->value().item();
    accumulate(*parts.id_mdif);
  }
  b.triplet_loss = parts.triplet->value().item();
  accumulate(*parts.triplet);
  b.total_var = *total;
  b.total = b.total_var.value().item();
  return b;
}

}  // namespace damix::obj
