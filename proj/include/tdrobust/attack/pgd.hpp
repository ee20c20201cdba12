#pragma once

// L-infinity PGD over a set of models.
//
//   single: ordinary PGD on models[0]
//   avg:    ascend the mean loss; gradients are accumulated model by model
//   min:    ascend min_j L(F_j, V'); each step follows the gradient of the
//           model whose batch loss is currently smallest
//
// Every step is x' <- proj(x' + step * sign(g)), projecting onto the eps-ball
// around x first and the box second. Each (subroutine, restart) candidate
// starts from its own stream derived from (subroutine, restart, attempt), and
// per-sample random starts from a further (sample) derivation, so results do
// not depend on evaluation order.

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tdrobust/nn/losses.hpp"

namespace tdr {

struct PerturbationConstraint {
  double epsilon = 0.3;
  double lo = 0.0;
  double hi = 1.0;

  void validate() const {
    if (!(epsilon >= 0.0)) throw std::invalid_argument("epsilon must be >= 0");
    if (!(lo < hi)) throw std::invalid_argument("box must satisfy lo < hi");
  }

  /// Clip to the eps-ball around the clean point, then to the box.
  double project(double adv, double clean) const {
    return std::clamp(std::clamp(adv, clean - epsilon, clean + epsilon), lo, hi);
  }

  Tensor project(const Tensor& adv, const Tensor& clean) const {
    Tensor out = adv;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = project(adv[i], clean[i]);
    return out;
  }

  /// Largest violation of either the ball or the box; <= tol means feasible.
  double violation(const Tensor& adv, const Tensor& clean) const {
    if (adv.shape() != clean.shape()) return std::numeric_limits<double>::infinity();
    double worst = 0.0;
    for (std::size_t i = 0; i < adv.size(); ++i) {
      if (!std::isfinite(adv[i])) return std::numeric_limits<double>::infinity();
      worst = std::max({worst, std::abs(adv[i] - clean[i]) - epsilon, lo - adv[i], adv[i] - hi});
    }
    return worst;
  }

  bool satisfied(const Tensor& adv, const Tensor& clean, double tol = 1e-12) const { return violation(adv, clean) <= tol; }
};

enum class EnsembleMode { single, avg, min };

inline const char* mode_name(EnsembleMode m) {
  switch (m) {
    case EnsembleMode::single: return "single";
    case EnsembleMode::avg: return "avg";
    case EnsembleMode::min: return "min";
  }
  return "?";
}

struct PgdSubroutine {
  LossSpec loss;
  std::size_t restarts = 1;
};

struct PgdConfig {
  std::size_t steps = 100;
  double step_size = 0.01;
  std::size_t restarts = 1;
  bool random_start = true;
  LossSpec loss = LossSpec::cross_entropy();
  /// When non-empty, replaces (loss, restarts) with a menu of subroutines.
  std::vector<PgdSubroutine> menu;
  /// Objective used to choose among candidates; defaults to `loss`.
  std::optional<LossSpec> selector;

  std::vector<PgdSubroutine> subroutines() const {
    if (!menu.empty()) return menu;
    return {{loss, restarts}};
  }
  LossSpec selection_loss() const { return selector.value_or(loss); }

  void validate() const {
    if (!(step_size > 0.0)) throw std::invalid_argument("PGD step size must be > 0");
    for (const auto& s : subroutines())
      if (s.restarts == 0) throw std::invalid_argument("PGD restarts must be >= 1");
  }

  /// `untargeted` CW restarts plus one targeted CW run per class, selected by
  /// the confidence loss.
  static PgdConfig cw_menu(std::size_t steps, double step_size, std::size_t untargeted, std::size_t classes) {
    PgdConfig c;
    c.steps = steps;
    c.step_size = step_size;
    c.loss = LossSpec::cw_untargeted();
    c.menu.push_back({LossSpec::cw_untargeted(), untargeted});
    for (std::size_t t = 0; t < classes; ++t) c.menu.push_back({LossSpec::cw_targeted(static_cast<int>(t)), 1});
    c.selector = LossSpec::confidence();
    return c;
  }
};

struct PgdStats {
  std::size_t gradient_steps = 0;   // PGD iterations run, summed over candidates
  std::size_t candidates = 0;
  std::size_t nonfinite_restarts = 0;
};

class PgdError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossGrad {
  std::vector<double> grad;        // d(sum_i loss_i)/dx', [n*d]
  std::vector<double> per_sample;  // loss_i (0 for excluded samples)
  std::vector<char> included;
  std::size_t count = 0;
  double mean() const { return count == 0 ? 0.0 : sum() / static_cast<double>(count); }
  double sum() const {
    double s = 0.0;
    for (double v : per_sample) s += v;
    return s;
  }
};

/// Per-sample losses and their input gradient for one model (eval mode).
inline LossGrad loss_and_input_grad(const Classifier& m, const Tensor& x, std::span<const int> y, const LossSpec& loss) {
  Tape t;
  auto b = m.bind(t, false);
  Var xv = t.leaf(x, true, "x");
  PerSampleLoss p = per_sample_loss(loss, m.forward(t, b, xv).logits, y);
  LossGrad out;
  out.per_sample = p.values.value().storage();
  out.included = p.included;
  out.count = p.count;
  t.backward(ops::sum(p.values));
  out.grad = t.grad(xv);
  return out;
}

struct SampleLosses {
  std::vector<double> values;
  std::vector<char> included;
};

/// Per-sample losses only (no gradient).
inline SampleLosses sample_losses(const Classifier& m, const Tensor& x, std::span<const int> y, const LossSpec& loss) {
  Tape t;
  auto b = m.bind(t, false);
  PerSampleLoss p = per_sample_loss(loss, m.forward(t, b, t.constant(x)).logits, y);
  return {p.values.value().storage(), p.included};
}

/// Aggregate per-sample loss of a candidate over the model set (mean for
/// single/avg, min for min). Excluded samples score -inf.
inline std::vector<double> aggregate_sample_losses(std::span<const Classifier> models, EnsembleMode mode, const Tensor& x,
                                                   std::span<const int> y, const LossSpec& loss) {
  const std::size_t n = y.size();
  std::vector<double> agg(n, mode == EnsembleMode::min ? std::numeric_limits<double>::infinity() : 0.0);
  std::vector<char> valid(n, 1);
  const std::size_t used = mode == EnsembleMode::single ? 1 : models.size();
  for (std::size_t j = 0; j < used; ++j) {
    const auto s = sample_losses(models[j], x, y, loss);
    for (std::size_t i = 0; i < n; ++i) {
      valid[i] = valid[i] && s.included[i];
      if (mode == EnsembleMode::min)
        agg[i] = std::min(agg[i], s.values[i]);
      else
        agg[i] += s.values[i] / static_cast<double>(used);
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    if (!valid[i]) agg[i] = -std::numeric_limits<double>::infinity();
  return agg;
}

/// Batch objective of the model set: mean loss (single/avg) or min over models
/// of the batch-mean loss (min).
inline double ensemble_objective(std::span<const Classifier> models, EnsembleMode mode, const LabeledSet& V,
                                 const LossSpec& loss) {
  if (mode == EnsembleMode::single) return evaluate_loss(models[0], V, loss);
  double acc = mode == EnsembleMode::min ? std::numeric_limits<double>::infinity() : 0.0;
  for (const auto& m : models) {
    const double l = evaluate_loss(m, V, loss);
    acc = mode == EnsembleMode::min ? std::min(acc, l) : acc + l / static_cast<double>(models.size());
  }
  return acc;
}

namespace detail {

inline bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

/// One PGD trajectory. Returns nullopt on a non-finite gradient.
inline std::optional<Tensor> pgd_trajectory(std::span<const Classifier> models, EnsembleMode mode, const LabeledSet& V,
                                            const PerturbationConstraint& c, const PgdConfig& cfg, const LossSpec& loss,
                                            Rng stream, PgdStats& stats) {
  const Tensor& x = V.features;
  const std::size_t n = V.size(), d = V.dim();
  Tensor adv = x;
  if (cfg.random_start && c.epsilon > 0.0) {
    Rng starts = stream.derive("start");
    for (std::size_t i = 0; i < n; ++i) {
      Rng r = starts.derive(static_cast<std::uint64_t>(i));
      for (std::size_t k = 0; k < d; ++k) adv[i * d + k] = c.project(x[i * d + k] + r.uniform(-c.epsilon, c.epsilon), x[i * d + k]);
    }
  }
  std::vector<double> g(n * d);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    ++stats.gradient_steps;
    if (mode == EnsembleMode::single) {
      auto lg = loss_and_input_grad(models[0], adv, V.labels, loss);
      g = std::move(lg.grad);
    } else if (mode == EnsembleMode::avg) {
      std::fill(g.begin(), g.end(), 0.0);
      const double w = 1.0 / static_cast<double>(models.size());
      for (const auto& m : models) {
        auto lg = loss_and_input_grad(m, adv, V.labels, loss);
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += w * lg.grad[k];
      }
    } else {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& m : models) {
        auto lg = loss_and_input_grad(m, adv, V.labels, loss);
        const double l = lg.mean();
        if (l < best) {
          best = l;
          g = std::move(lg.grad);
        }
      }
    }
    if (!all_finite(g)) return std::nullopt;
    for (std::size_t k = 0; k < g.size(); ++k) {
      const double s = g[k] > 0.0 ? 1.0 : (g[k] < 0.0 ? -1.0 : 0.0);
      adv[k] = c.project(adv[k] + cfg.step_size * s, x[k]);
    }
  }
  return adv;
}

}  // namespace detail

/// Runs every (subroutine, restart) candidate and keeps, per sample, the one
/// scoring highest on the selection objective aggregated over the model set.
/// In min mode the choice is made per batch on the min-over-models batch
/// objective, since that objective does not decompose over samples.
inline LabeledSet pgd_solve(std::span<const Classifier> models, EnsembleMode mode, const LabeledSet& V,
                            const PerturbationConstraint& c, const PgdConfig& cfg, Rng rng, PgdStats* stats_out = nullptr) {
  if (models.empty()) throw std::invalid_argument("pgd_solve needs at least one model");
  c.validate();
  cfg.validate();
  const std::size_t n = V.size(), d = V.dim();
  for (double v : V.features.values())
    if (!(v >= c.lo && v <= c.hi)) throw std::invalid_argument("pgd_solve: clean features outside the box");
  PgdStats stats;
  const LossSpec selector = cfg.selection_loss();
  const auto subs = cfg.subroutines();

  Tensor best = V.features;
  std::vector<double> best_score(n, -std::numeric_limits<double>::infinity());
  double best_batch = -std::numeric_limits<double>::infinity();
  bool have = false;

  for (std::size_t s = 0; s < subs.size(); ++s) {
    for (std::size_t r = 0; r < subs[s].restarts; ++r) {
      std::optional<Tensor> cand;
      for (std::uint64_t attempt = 0; attempt < 3 && !cand; ++attempt) {
        Rng stream = rng.derive("candidate").derive(s).derive(r).derive(attempt);
        cand = detail::pgd_trajectory(models, mode, V, c, cfg, subs[s].loss, stream, stats);
        if (!cand) ++stats.nonfinite_restarts;
      }
      if (!cand)
        throw PgdError("PGD candidate (subroutine " + subs[s].loss.name() + ", restart " + std::to_string(r) +
                       ") hit non-finite gradients on every attempt");
      ++stats.candidates;
      if (mode == EnsembleMode::min) {
        const double obj = ensemble_objective(models, mode, V.with_features(*cand, "cand"), selector);
        if (!have || obj > best_batch) {
          best_batch = obj;
          best = std::move(*cand);
        }
      } else {
        const auto score = aggregate_sample_losses(models, mode, *cand, V.labels, selector);
        for (std::size_t i = 0; i < n; ++i) {
          if (!have || score[i] > best_score[i]) {
            best_score[i] = score[i];
            std::copy_n(cand->data() + i * d, d, best.data() + i * d);
          }
        }
      }
      have = true;
    }
  }
  if (stats_out) *stats_out = stats;
  return V.with_features(std::move(best), "pgd");
}

inline LabeledSet pgd_solve(const Classifier& model, const LabeledSet& V, const PerturbationConstraint& c,
                            const PgdConfig& cfg, Rng rng, PgdStats* stats = nullptr) {
  return pgd_solve(std::span<const Classifier>(&model, 1), EnsembleMode::single, V, c, cfg, std::move(rng), stats);
}

}  // namespace tdr
