#pragma once

// Attacks on transductive defenses: transfer, the fixed point attack and the
// greedy model space attack. The defense enters only through a simulator
// that the attacker runs with its own randomness.

#include <functional>
#include <limits>

#include "tdrobust/attack/pgd.hpp"

namespace tdr {

/// Attacker-side simulation of the defender: (perturbed features, stream) -> adapted model.
using DefenseSimulator = std::function<Classifier(const Tensor& U, Rng rng)>;

struct AttackRecord {
  std::vector<LabeledSet> iterates;               // V^(0..T)
  std::vector<std::uint64_t> model_fingerprints;  // F^(0..T+1), adapted fingerprints
  std::vector<double> losses;                     // L(F^(i+1), V^(i))
  std::vector<std::size_t> pgd_steps;             // PGD step count used at each iteration
  std::size_t selected = 0;
  std::string method;

  const LabeledSet& best() const { return iterates.at(selected); }
};

/// First index of the maximum; NaN losses never win.
inline std::size_t select_best_iterate(std::span<const double> losses) {
  if (losses.empty()) throw std::invalid_argument("select_best_iterate: empty record");
  std::size_t k = 0;
  double best = -std::numeric_limits<double>::infinity();
  bool seen = false;
  for (std::size_t i = 0; i < losses.size(); ++i)
    if (!std::isnan(losses[i]) && (!seen || losses[i] > best)) {
      best = losses[i];
      k = i;
      seen = true;
    }
  return k;
}

inline const LabeledSet& select_best_iterate(const AttackRecord& r) {
  return r.iterates.at(select_best_iterate(std::span<const double>(r.losses)));
}

/// PGD against a static model. Uses the stream of iteration 0 so it coincides
/// with FPA and GMSA at T = 0.
inline LabeledSet transfer_attack(const Classifier& surrogate, const LabeledSet& V, const PerturbationConstraint& c,
                                  const PgdConfig& cfg, Rng rng, PgdStats* stats = nullptr) {
  return pgd_solve(surrogate, V, c, cfg, rng.derive("iterate", 0), stats);
}

enum class GmsaMode { avg, min };

inline const char* gmsa_mode_name(GmsaMode m) { return m == GmsaMode::avg ? "gmsa-avg" : "gmsa-min"; }

namespace detail {

/// Shared loop of FPA and GMSA. `history` true attacks all models so far;
/// false attacks only the latest one.
inline AttackRecord model_space_loop(const DefenseSimulator& gamma, const LabeledSet& V, const Classifier& F0,
                                     std::size_t T, bool history, GmsaMode mode, const PerturbationConstraint& c,
                                     const PgdConfig& cfg, Rng rng) {
  AttackRecord rec;
  std::vector<Classifier> models{F0};
  rec.model_fingerprints.push_back(F0.adapted_fingerprint());
  const LossSpec selector = cfg.selection_loss();
  for (std::size_t i = 0; i <= T; ++i) {
    PgdConfig step_cfg = cfg;
    LabeledSet Vi;
    if (!history || models.size() == 1) {
      // One model: L_AVG = L_MIN = L_a, so every variant is plain PGD.
      Vi = pgd_solve(std::span<const Classifier>(&models.back(), 1), EnsembleMode::single, V, c, step_cfg,
                     rng.derive("iterate", i));
    } else {
      if (mode == GmsaMode::min) step_cfg.steps = cfg.steps * (i + 1);
      Vi = pgd_solve(models, mode == GmsaMode::avg ? EnsembleMode::avg : EnsembleMode::min, V, c, step_cfg,
                     rng.derive("iterate", i));
    }
    rec.pgd_steps.push_back(step_cfg.steps);
    Classifier next = gamma(Vi.features, rng.derive("gamma", i));
    rec.losses.push_back(evaluate_loss(next, Vi, selector));
    rec.model_fingerprints.push_back(next.adapted_fingerprint());
    rec.iterates.push_back(std::move(Vi));
    if (history)
      models.push_back(std::move(next));
    else
      models.back() = std::move(next);
  }
  rec.selected = select_best_iterate(std::span<const double>(rec.losses));
  return rec;
}

}  // namespace detail

/// Fixed point attack: iteration i attacks F^(i), the defender model induced
/// by the previous iterate.
inline AttackRecord fpa(const DefenseSimulator& gamma, const LabeledSet& V, const Classifier& F0, std::size_t T,
                        const PerturbationConstraint& c, const PgdConfig& cfg, Rng rng) {
  AttackRecord r = detail::model_space_loop(gamma, V, F0, T, false, GmsaMode::avg, c, cfg, std::move(rng));
  r.method = "fpa";
  return r;
}

/// Greedy model space attack: iteration i attacks the mean (AVG) or minimum
/// (MIN) loss over F^(0..i). MIN scales the PGD step count by i + 1.
inline AttackRecord gmsa(const DefenseSimulator& gamma, const LabeledSet& V, const Classifier& F0, std::size_t T,
                         GmsaMode mode, const PerturbationConstraint& c, const PgdConfig& cfg, Rng rng) {
  AttackRecord r = detail::model_space_loop(gamma, V, F0, T, true, mode, c, cfg, std::move(rng));
  r.method = gmsa_mode_name(mode);
  return r;
}

}  // namespace tdr
