#pragma once

// Runtime masking and cleansing: per test point, fine-tune the current model
// on its K nearest neighbours (penultimate features) in an augmented set.

#include <numeric>

#include "tdrobust/train/trainers.hpp"

namespace tdr {

struct RmcConfig {
  std::size_t k = 64;
  std::size_t adv_multiplier = 1;
  AdversarySpec adversary = AdversarySpec::linf(0.3, 0.01, 100);
  FinetuneConfig finetune{100, 5, 128, OptimizerSpec::adam(2e-4)};
};

/// D' = D plus adv_multiplier PGD copies of D against the base model.
inline LabeledSet rmc_augmented_set(const Classifier& base, const LabeledSet& D, const RmcConfig& cfg, Rng rng) {
  LabeledSet out = D;
  for (std::size_t m = 0; m < cfg.adv_multiplier; ++m)
    out = concat(out, pgd_solve(base, D, cfg.adversary.constraint, cfg.adversary.pgd, rng.derive("copy", m)));
  out.provenance = D.provenance + "/rmc-augmented";
  return out;
}

/// Indices of the k members of `pool_features` closest to `query` (Euclidean);
/// ties go to the smaller index.
inline std::vector<std::size_t> nearest_rows(const Tensor& pool_features, std::span<const double> query, std::size_t k) {
  const std::size_t n = pool_features.rows(), d = pool_features.cols();
  if (k == 0 || k > n) throw std::invalid_argument("neighbour count must be in [1, " + std::to_string(n) + "]");
  if (query.size() != d) throw ShapeError("nearest_rows: query width differs from pool");
  std::vector<double> dist(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double diff = pool_features.at(i, c) - query[c];
      s += diff * diff;
    }
    dist[i] = s;
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return dist[a] < dist[b] || (dist[a] == dist[b] && a < b); });
  idx.resize(k);
  return idx;
}

/// Adaptation chain state. Single-owner: rounds must be applied in order.
class RmcState {
 public:
  RmcState(LabeledSet augmented, Classifier model, RmcConfig cfg)
      : augmented_(std::move(augmented)), current_(std::move(model)), cfg_(std::move(cfg)) {
    if (cfg_.k == 0 || cfg_.k > augmented_.size())
      throw std::invalid_argument("RMC: K=" + std::to_string(cfg_.k) + " must be in [1, |D'|=" +
                                  std::to_string(augmented_.size()) + "]");
  }

  const LabeledSet& augmented() const { return augmented_; }
  const Classifier& current() const { return current_; }
  const RmcConfig& config() const { return cfg_; }

  /// Neighbourhood of one point under the current model's features.
  std::vector<std::size_t> neighbors(std::span<const double> x_hat) const {
    const Tensor q = current_.features(Tensor({1, x_hat.size()}, std::vector<double>(x_hat.begin(), x_hat.end())));
    return nearest_rows(current_.features(augmented_.features), q.values(), cfg_.k);
  }

  /// Fine-tunes the current model on the neighbourhood of x_hat (one row).
  /// The neighbourhood doubles as the early-stopping validation set.
  Classifier adapt(const Tensor& x_hat, Rng rng) const {
    if (x_hat.rows() != 1) throw std::invalid_argument("RMC adapts on exactly one test point per round");
    const LabeledSet N = augmented_.subset(neighbors(x_hat.row(0)), "neighbors");
    return finetune_early_stop(current_, N, N, cfg_.finetune, std::move(rng)).model;
  }

  void advance(Classifier adapted) { current_ = std::move(adapted); }

 private:
  LabeledSet augmented_;
  Classifier current_;
  RmcConfig cfg_;
};

}  // namespace tdr
