#pragma once

#include <cmath>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tdrobust/attack/pgd.hpp"
#include "tdrobust/diffcore/optim.hpp"

namespace tdr {

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Multiplicative decay at listed epochs.
struct LrSchedule {
  std::vector<std::size_t> decay_epochs;
  double factor = 0.1;

  double at(std::size_t epoch, double base) const {
    double lr = base;
    for (std::size_t e : decay_epochs)
      if (epoch >= e) lr *= factor;
    return lr;
  }
};

struct AdversarySpec {
  PerturbationConstraint constraint;
  PgdConfig pgd;

  static AdversarySpec linf(double eps, double step, std::size_t steps, bool random_start = true) {
    AdversarySpec a;
    a.constraint.epsilon = eps;
    a.pgd.steps = steps;
    a.pgd.step_size = step;
    a.pgd.random_start = random_start;
    return a;
  }
};

struct TrainConfig {
  Architecture arch;
  std::size_t epochs = 10;
  std::size_t batch = 128;
  OptimizerSpec optimizer = OptimizerSpec::adam(1e-3);
  LrSchedule schedule;
  std::optional<AdversarySpec> adversary;
  double mix_ratio = 0.5;  // fraction of each batch replaced by adversarial examples
  std::uint64_t seed = 0;

  void validate() const {
    if (batch == 0) throw std::invalid_argument("batch size must be positive");
    if (!(mix_ratio >= 0.0 && mix_ratio <= 1.0)) throw std::invalid_argument("mix ratio must be in [0,1]");
    if (adversary) {
      if (!(adversary->constraint.epsilon >= 0.0)) throw std::invalid_argument("adversary epsilon must be >= 0");
      if (!(adversary->pgd.step_size > 0.0)) throw std::invalid_argument("adversary step size must be > 0");
    }
  }
};

struct CurvePoint {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = std::nan("");
  double val_acc = std::nan("");
};

struct TrainResult {
  Classifier model;
  std::vector<CurvePoint> curve;
  std::uint64_t init_fingerprint = 0;
};

inline void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& curve) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write curve '" + path + "'");
  os << "epoch,train_loss,val_loss,val_acc\n";
  os.precision(17);
  for (const auto& p : curve) os << p.epoch << ',' << p.train_loss << ',' << p.val_loss << ',' << p.val_acc << '\n';
}

namespace detail {

inline GradMap collect_grads(const Tape& t, const Classifier::Binding& b, const ParamSet& ps) {
  GradMap g;
  for (std::size_t i = 0; i < ps.size(); ++i)
    if (ps[i].role != ParamRole::buffer) g[ps[i].name] = t.grad(b.params[i]);
  return g;
}

/// One optimizer step of cross-entropy on (x, y). Returns the batch loss.
inline double supervised_step(Classifier& model, Optimizer& opt, const Tensor& x, std::span<const int> y,
                              bool update_stats, const std::string& where) {
  Tape t;
  auto b = model.bind(t, true);
  auto out = model.forward(t, b, t.constant(x), update_stats ? Mode::train : Mode::eval);
  Var loss = batch_loss(LossSpec::cross_entropy(), out.logits, y);
  const double lv = loss.value()[0];
  if (!std::isfinite(lv)) throw TrainingDiverged(where + ": loss is not finite");
  t.backward(loss);
  if (!opt.step(model.params(), collect_grads(t, b, model.params())))
    throw TrainingDiverged(where + ": non-finite gradient, update rejected");
  if (update_stats) model.update_norm_stats(out.batch_stats);
  return lv;
}

inline void fill_validation(CurvePoint& p, const Classifier& m, const LabeledSet* val) {
  if (!val) return;
  p.val_loss = cross_entropy(m, *val);
  p.val_acc = accuracy(m, *val);
}

}  // namespace detail

/// Supervised training, optionally with PGD examples mixed into each batch:
/// the trailing round(ratio * b) positions of a batch are replaced by their
/// PGD perturbations against the current model. PGD randomness comes from a
/// separate stream, so an eps = 0 adversary reproduces standard training.
inline TrainResult fit(const LabeledSet& D, const TrainConfig& cfg, Rng rng, const LabeledSet* val = nullptr) {
  cfg.validate();
  if (D.size() == 0) throw std::invalid_argument("training set is empty");
  TrainResult res{Classifier::init(cfg.arch, rng.derive("init")), {}, 0};
  res.init_fingerprint = res.model.fingerprint();
  Optimizer opt(cfg.optimizer);
  Rng adv_rng = rng.derive("adversary");
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    opt.set_lr(cfg.schedule.at(e, cfg.optimizer.lr));
    Rng order = rng.derive("epoch", e);
    const auto batches = shuffled_batches(D.size(), cfg.batch, order);
    double total = 0.0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      LabeledSet B = D.subset(batches[bi]);
      if (cfg.adversary) {
        const std::size_t k = static_cast<std::size_t>(std::llround(cfg.mix_ratio * static_cast<double>(B.size())));
        if (k > 0) {
          const LabeledSet tail = B.slice(B.size() - k, B.size());
          const LabeledSet adv = pgd_solve(res.model, tail, cfg.adversary->constraint, cfg.adversary->pgd,
                                           adv_rng.derive(e).derive(bi));
          std::copy(adv.features.storage().begin(), adv.features.storage().end(),
                    B.features.storage().begin() + static_cast<std::ptrdiff_t>((B.size() - k) * B.dim()));
        }
      }
      total += detail::supervised_step(res.model, opt, B.features, B.labels, true,
                                       "epoch " + std::to_string(e) + " batch " + std::to_string(bi));
    }
    CurvePoint p{e, total / static_cast<double>(batches.size())};
    detail::fill_validation(p, res.model, val);
    res.curve.push_back(p);
  }
  return res;
}

inline TrainResult train_standard(const LabeledSet& D, TrainConfig cfg, Rng rng, const LabeledSet* val = nullptr) {
  cfg.adversary.reset();
  return fit(D, cfg, std::move(rng), val);
}

inline TrainResult train_adversarial(const LabeledSet& D, const TrainConfig& cfg, Rng rng, const LabeledSet* val = nullptr) {
  if (!cfg.adversary) throw std::invalid_argument("train_adversarial needs an adversary spec");
  return fit(D, cfg, std::move(rng), val);
}

// ---------------------------------------------------------------------------
// Domain-adversarial training.

/// scale * (2 / (1 + exp(-10 p)) - 1).
inline double dann_alpha(double progress, double scale) { return scale * (2.0 / (1.0 + std::exp(-10.0 * progress)) - 1.0); }

struct DannConfig {
  Architecture arch;  // encoder = layers before the feature boundary, predictor = the rest
  std::vector<std::size_t> discriminator_hidden{32};
  double alpha_scale = 0.1;
  std::size_t epochs = 10;
  std::size_t batch = 128;
  OptimizerSpec optimizer = OptimizerSpec::adam(1e-3);
  std::uint64_t seed = 0;
};

struct DannCurvePoint {
  std::size_t epoch = 0;
  double class_loss = 0.0;
  double domain_loss = 0.0;
  double domain_acc = 0.0;  // discriminator accuracy over the epoch's batches
  double alpha = 0.0;
};

struct DannResult {
  Classifier model;
  Classifier discriminator;  // features -> {source=0, target=1}
  std::vector<DannCurvePoint> curve;
};

inline Architecture dann_discriminator_arch(std::size_t feature_dim, const std::vector<std::size_t>& hidden) {
  return Architecture::mlp(feature_dim, hidden, 2, false);
}

/// Accuracy of a domain discriminator on features of source vs target points.
inline double domain_accuracy(const Classifier& model, const Classifier& disc, const Tensor& source, const Tensor& target) {
  std::size_t ok = 0;
  for (int p : disc.predict(model.features(source))) ok += p == 0;
  for (int p : disc.predict(model.features(target))) ok += p == 1;
  return static_cast<double>(ok) / static_cast<double>(source.rows() + target.rows());
}

/// Trains encoder+predictor on labeled D and a discriminator on gradient-
/// reversed features of D (label 0) and U_target (label 1). Source and target
/// batches are normalised with their own batch statistics; running statistics
/// follow the source batches only.
inline DannResult train_dann(const LabeledSet& D, const Tensor& U_target, const DannConfig& cfg, Rng rng) {
  if (D.size() == 0 || U_target.rows() == 0) throw std::invalid_argument("train_dann needs nonempty source and target sets");
  if (U_target.cols() != D.dim()) throw ShapeError("train_dann: target feature width differs from source");
  DannResult res{Classifier::init(cfg.arch, rng.derive("init")),
                 Classifier::init(dann_discriminator_arch(cfg.arch.feature_dim(), cfg.discriminator_hidden), rng.derive("disc-init")),
                 {}};
  Optimizer opt(cfg.optimizer), dopt(cfg.optimizer);
  const std::size_t per_epoch = (D.size() + cfg.batch - 1) / cfg.batch;
  const double total_steps = static_cast<double>(std::max<std::size_t>(1, cfg.epochs * per_epoch));
  std::size_t step = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    Rng order = rng.derive("epoch", e);
    Rng torder = rng.derive("target", e);
    const auto batches = shuffled_batches(D.size(), cfg.batch, order);
    auto tbatches = shuffled_batches(U_target.rows(), cfg.batch, torder);
    DannCurvePoint cp{e};
    std::size_t dom_ok = 0, dom_n = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi, ++step) {
      const double alpha = dann_alpha(static_cast<double>(step) / total_steps, cfg.alpha_scale);
      cp.alpha = alpha;
      const LabeledSet S = D.subset(batches[bi]);
      const Tensor T = U_target.gather_rows(tbatches[bi % tbatches.size()]);

      Tape t;
      auto b = res.model.bind(t, true);
      auto db = res.discriminator.bind(t, true);
      auto src = res.model.forward(t, b, t.constant(S.features), Mode::train);
      auto tgt = res.model.forward(t, b, t.constant(T), Mode::train);
      Var cls = batch_loss(LossSpec::cross_entropy(), src.logits, S.labels);

      const std::vector<int> zeros(S.size(), 0), ones(T.rows(), 1);
      Var ds = res.discriminator.forward(t, db, ops::grad_reverse(src.features, alpha)).logits;
      Var dt = res.discriminator.forward(t, db, ops::grad_reverse(tgt.features, alpha)).logits;
      Var dom = ops::scale(ops::add(ops::sum(ops::neg(ops::pick(ops::log_softmax(ds), zeros))),
                                    ops::sum(ops::neg(ops::pick(ops::log_softmax(dt), ones)))),
                           1.0 / static_cast<double>(S.size() + T.rows()));
      for (std::size_t i = 0; i < S.size(); ++i) dom_ok += ds.value().at(i, 0) >= ds.value().at(i, 1);
      for (std::size_t i = 0; i < T.rows(); ++i) dom_ok += dt.value().at(i, 1) > dt.value().at(i, 0);
      dom_n += S.size() + T.rows();

      Var total = ops::add(cls, dom);
      const double cv = cls.value()[0], dv = dom.value()[0];
      if (!std::isfinite(cv) || !std::isfinite(dv))
        throw TrainingDiverged("DANN epoch " + std::to_string(e) + " batch " + std::to_string(bi) + ": loss is not finite");
      t.backward(total);
      if (!opt.step(res.model.params(), detail::collect_grads(t, b, res.model.params())) ||
          !dopt.step(res.discriminator.params(), detail::collect_grads(t, db, res.discriminator.params())))
        throw TrainingDiverged("DANN epoch " + std::to_string(e) + ": non-finite gradient, update rejected");
      res.model.update_norm_stats(src.batch_stats);
      cp.class_loss += cv / static_cast<double>(batches.size());
      cp.domain_loss += dv / static_cast<double>(batches.size());
    }
    cp.domain_acc = static_cast<double>(dom_ok) / static_cast<double>(dom_n);
    res.curve.push_back(cp);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Early-stopped fine-tuning.

struct FinetuneConfig {
  std::size_t max_epochs = 100;
  std::size_t patience = 5;
  std::size_t batch = 128;
  OptimizerSpec optimizer = OptimizerSpec::adam(2e-4);
};

struct FinetuneResult {
  Classifier model;
  std::size_t epochs_run = 0;
  double best_val_loss = 0.0;
  std::vector<CurvePoint> curve;
};

/// Fine-tunes with cross-entropy on V_fit and returns the parameters of the
/// epoch with the lowest validation loss (the input model counts as epoch 0).
/// Stops at max_epochs or after `patience` consecutive non-improving epochs.
/// Norm layers run on their frozen running statistics.
inline FinetuneResult finetune_early_stop(const Classifier& model, const LabeledSet& V_fit, const LabeledSet& V_val,
                                          const FinetuneConfig& cfg, Rng rng) {
  if (V_val.size() == 0) throw std::invalid_argument("finetune_early_stop: validation set is empty");
  if (V_fit.size() == 0) throw std::invalid_argument("finetune_early_stop: fit set is empty");
  if (cfg.patience < 1) throw std::invalid_argument("finetune_early_stop: patience must be >= 1");
  FinetuneResult res{model, 0, cross_entropy(model, V_val), {}};
  Classifier cur = model;
  Optimizer opt(cfg.optimizer);
  std::size_t stale = 0;
  for (std::size_t e = 0; e < cfg.max_epochs; ++e) {
    Rng order = rng.derive("epoch", e);
    double total = 0.0;
    const auto batches = shuffled_batches(V_fit.size(), cfg.batch, order);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const LabeledSet B = V_fit.subset(batches[bi]);
      total += detail::supervised_step(cur, opt, B.features, B.labels, false, "finetune epoch " + std::to_string(e));
    }
    ++res.epochs_run;
    CurvePoint p{e, total / static_cast<double>(batches.size())};
    detail::fill_validation(p, cur, &V_val);
    res.curve.push_back(p);
    if (p.val_loss < res.best_val_loss) {
      res.best_val_loss = p.val_loss;
      res.model = cur;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  return res;
}

}  // namespace tdr
