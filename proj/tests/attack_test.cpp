#include <gtest/gtest.h>

#include <cmath>

#include "tdrobust/attack/model_space.hpp"
#include "tdrobust/data/blobs.hpp"
#include "tdrobust/train/trainers.hpp"

using namespace tdr;

namespace {

/// Two-class linear model: logits = x W + b.
Classifier linear_model(const std::vector<double>& w0, const std::vector<double>& w1, double b0 = 0.0, double b1 = 0.0) {
  const std::size_t d = w0.size();
  Classifier m = Classifier::zeros(Architecture::mlp(d, {}, 2, false));
  Tensor& W = m.params().at("L0.w");
  for (std::size_t k = 0; k < d; ++k) {
    W.at(k, 0) = w0[k];
    W.at(k, 1) = w1[k];
  }
  m.params().at("L0.b")[0] = b0;
  m.params().at("L0.b")[1] = b1;
  return m;
}

LabeledSet random_set(Rng rng, std::size_t n, std::size_t d, std::size_t classes) {
  LabeledSet V{Tensor({n, d}), std::vector<int>(n), classes, "rand"};
  for (auto& v : V.features.storage()) v = rng.uniform(0.0, 1.0);
  for (auto& y : V.labels) y = static_cast<int>(rng.index(classes));
  return V;
}

Classifier small_net(std::uint64_t seed, std::size_t d = 4, std::size_t classes = 3) {
  return Classifier::init(Architecture::mlp(d, {8}, classes), Rng(seed));
}

/// Toy defender: a fresh random net whose first bias moves with the mean of U.
DefenseSimulator toy_gamma() {
  return [](const Tensor& U, Rng rng) {
    Classifier m = Classifier::init(Architecture::mlp(4, {8}, 3), rng);
    double mean = 0.0;
    for (double v : U.values()) mean += v;
    m.params().at("L0.b")[0] += mean / static_cast<double>(U.size());
    return m;
  };
}

PgdConfig short_pgd() {
  PgdConfig cfg;
  cfg.steps = 5;
  cfg.step_size = 0.04;
  return cfg;
}

}  // namespace

TEST(Constraint, ProjectionClipsBallThenBox) {
  PerturbationConstraint c{0.1};
  EXPECT_DOUBLE_EQ(c.project(0.9, 0.5), 0.6);
  EXPECT_DOUBLE_EQ(c.project(0.1, 0.5), 0.4);
  EXPECT_EQ(c.project(1.2, 0.95), 1.0);
  EXPECT_EQ(c.project(-0.2, 0.05), 0.0);
  EXPECT_THROW(PerturbationConstraint{-0.1}.validate(), std::invalid_argument);
}

TEST(Constraint, ClippingABoxPointToItsOwnBallIsNoop) {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.uniform(0.0, 1.0), eps = rng.uniform(0.0, 0.5);
    EXPECT_EQ(PerturbationConstraint{eps}.project(x, x), x);
  }
}

TEST(Pgd, ZeroStepsWithoutRandomStartIsIdentity) {
  const auto V = random_set(Rng(1), 20, 4, 3);
  PgdConfig cfg;
  cfg.steps = 0;
  cfg.random_start = false;
  EXPECT_EQ(pgd_solve(small_net(2), V, {0.3}, cfg, Rng(4)).features, V.features);
}

TEST(Pgd, ZeroBudgetIsIdentity) {
  const auto V = random_set(Rng(1), 20, 4, 3);
  PgdConfig cfg;
  cfg.steps = 25;
  cfg.restarts = 3;
  EXPECT_EQ(pgd_solve(small_net(2), V, {0.0}, cfg, Rng(4)).features, V.features);
}

TEST(Pgd, LinearModelFgsmClosedForm) {
  // For a linear two-class model the CE input gradient has the sign of
  // (w_other - w_label), so one step of size >= eps lands on the ball corner.
  const std::vector<double> w0{1.0, -2.0, 0.5}, w1{-1.0, 0.5, 2.0};
  const Classifier m = linear_model(w0, w1, 0.1, -0.2);
  Rng rng(8);
  const double eps = 0.1;
  LabeledSet V{Tensor({30, 3}), std::vector<int>(30), 2, "lin"};
  for (std::size_t i = 0; i < 30; ++i) {
    V.labels[i] = static_cast<int>(i % 2);
    for (std::size_t k = 0; k < 3; ++k) V.features.at(i, k) = rng.uniform(0.2, 0.8);
  }
  for (double step : {0.1, 0.25}) {
    PgdConfig cfg;
    cfg.steps = 1;
    cfg.step_size = step;
    cfg.random_start = false;
    const LabeledSet A = pgd_solve(m, V, {eps}, cfg, Rng(1));
    for (std::size_t i = 0; i < 30; ++i)
      for (std::size_t k = 0; k < 3; ++k) {
        const double toward = V.labels[i] == 0 ? w1[k] - w0[k] : w0[k] - w1[k];
        const double expected = V.features.at(i, k) + eps * (toward > 0 ? 1.0 : -1.0);
        EXPECT_DOUBLE_EQ(A.features.at(i, k), expected) << i << "," << k;
      }
  }
}

TEST(Pgd, OutputsAlwaysSatisfyConstraint) {
  Rng gen(11);
  for (int trial = 0; trial < 30; ++trial) {
    const double eps = gen.uniform(0.0, 0.5);
    const auto V = random_set(gen.derive(trial), 10, 4, 3);
    PgdConfig cfg;
    cfg.steps = 1 + gen.index(10);
    cfg.step_size = gen.uniform(0.01, 0.3);
    cfg.restarts = 1 + gen.index(3);
    cfg.loss = trial % 2 ? LossSpec::cross_entropy() : LossSpec::cw_untargeted();
    const Classifier m = small_net(static_cast<std::uint64_t>(trial));
    const auto A = pgd_solve(m, V, {eps}, cfg, Rng(trial));
    EXPECT_TRUE(PerturbationConstraint{eps}.satisfied(A.features, V.features)) << "trial " << trial;
    EXPECT_EQ(A.labels, V.labels);
    std::vector<Classifier> ens{small_net(1), small_net(2), small_net(3)};
    for (auto mode : {EnsembleMode::avg, EnsembleMode::min}) {
      const auto B = pgd_solve(ens, mode, V, {eps}, cfg, Rng(trial));
      EXPECT_TRUE(PerturbationConstraint{eps}.satisfied(B.features, V.features)) << mode_name(mode);
    }
  }
}

TEST(Pgd, KeptCandidateBeatsEveryRestart) {
  const auto V = random_set(Rng(5), 40, 4, 3);
  const std::vector<Classifier> models{small_net(7), small_net(8)};
  PgdConfig cfg;
  cfg.steps = 5;
  cfg.step_size = 0.05;
  cfg.restarts = 4;
  const PerturbationConstraint c{0.2};
  for (auto mode : {EnsembleMode::single, EnsembleMode::avg, EnsembleMode::min}) {
    const Rng rng(21);
    const auto kept = pgd_solve(models, mode, V, c, cfg, rng);
    for (std::size_t r = 0; r < cfg.restarts; ++r) {
      PgdStats st;
      const auto cand = detail::pgd_trajectory(models, mode, V, c, cfg, cfg.loss,
                                               rng.derive("candidate").derive(0).derive(r).derive(0), st);
      ASSERT_TRUE(cand);
      if (mode == EnsembleMode::min) {
        EXPECT_GE(ensemble_objective(models, mode, kept, cfg.loss),
                  ensemble_objective(models, mode, V.with_features(*cand, "c"), cfg.loss));
      } else {
        const auto a = aggregate_sample_losses(models, mode, kept.features, V.labels, cfg.loss);
        const auto b = aggregate_sample_losses(models, mode, *cand, V.labels, cfg.loss);
        for (std::size_t i = 0; i < V.size(); ++i) EXPECT_GE(a[i], b[i]) << mode_name(mode) << " sample " << i;
      }
    }
  }
}

TEST(Pgd, IncreasesLossOverClean) {
  const auto s = gen_blobs(BlobsConfig::blobs2d(), Rng(1));
  TrainConfig tc;
  tc.arch = Architecture::mlp(2, {16}, 2);
  tc.epochs = 10;
  tc.batch = 32;
  tc.optimizer = OptimizerSpec::adam(1e-2);
  const auto m = train_standard(s.train, tc, Rng(2)).model;
  PgdConfig cfg;
  cfg.steps = 20;
  cfg.step_size = 0.02;
  const auto A = pgd_solve(m, s.test, {0.2}, cfg, Rng(3));
  EXPECT_GT(cross_entropy(m, A), cross_entropy(m, s.test));
  EXPECT_LT(accuracy(m, A), accuracy(m, s.test));
}

TEST(Pgd, SameSeedSameOutputAndSeedMatters) {
  const auto V = random_set(Rng(5), 20, 4, 3);
  PgdConfig cfg;
  cfg.steps = 3;
  cfg.step_size = 0.01;
  const auto m = small_net(3);
  EXPECT_EQ(pgd_solve(m, V, {0.3}, cfg, Rng(9)).features, pgd_solve(m, V, {0.3}, cfg, Rng(9)).features);
  EXPECT_NE(pgd_solve(m, V, {0.3}, cfg, Rng(9)).features, pgd_solve(m, V, {0.3}, cfg, Rng(10)).features);
}

TEST(Pgd, SampleIndependenceOfRandomStarts) {
  // A sample's trajectory depends only on its own start stream, so attacking
  // a prefix of the batch reproduces the prefix of the full attack.
  const auto V = random_set(Rng(5), 20, 4, 3);
  PgdConfig cfg;
  cfg.steps = 4;
  cfg.step_size = 0.05;
  const auto m = small_net(3);
  const auto full = pgd_solve(m, V, {0.3}, cfg, Rng(9));
  const auto head = pgd_solve(m, V.slice(0, 7), {0.3}, cfg, Rng(9));
  EXPECT_EQ(head.features, full.features.slice_rows(0, 7));
}

TEST(Pgd, NonFiniteModelRejectedWithDiagnostic) {
  // Finite but huge weights overflow the logits to inf, so gradients turn NaN.
  Classifier m = Classifier::init(Architecture::mlp(4, {8}, 3, false), Rng(3));
  for (auto& e : m.params().entries())
    for (auto& v : e.value.storage()) v = v > 0 ? 1e200 : -1e200;
  const auto V = random_set(Rng(5), 4, 4, 3);
  PgdConfig cfg;
  cfg.steps = 2;
  PgdStats st;
  try {
    pgd_solve(m, V, {0.3}, cfg, Rng(1), &st);
    FAIL() << "expected PgdError";
  } catch (const PgdError& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
  }
  EXPECT_EQ(st.nonfinite_restarts, 0u);  // stats are only published on success
}

TEST(Pgd, RejectsBadInputs) {
  const auto V = random_set(Rng(5), 4, 4, 3);
  PgdConfig cfg;
  EXPECT_THROW(pgd_solve(std::span<const Classifier>{}, EnsembleMode::avg, V, {0.3}, cfg, Rng(1)), std::invalid_argument);
  LabeledSet out = V;
  out.features[0] = 1.5;
  EXPECT_THROW(pgd_solve(small_net(1), out, {0.3}, cfg, Rng(1)), std::invalid_argument);
  cfg.step_size = 0.0;
  EXPECT_THROW(pgd_solve(small_net(1), V, {0.3}, cfg, Rng(1)), std::invalid_argument);
}

TEST(Pgd, SingleModelEnsembleModesCoincide) {
  const auto V = random_set(Rng(5), 12, 4, 3);
  PgdConfig cfg;
  cfg.steps = 6;
  cfg.step_size = 0.03;
  const std::vector<Classifier> one{small_net(4)};
  const auto s = pgd_solve(one, EnsembleMode::single, V, {0.2}, cfg, Rng(2));
  EXPECT_EQ(pgd_solve(one, EnsembleMode::avg, V, {0.2}, cfg, Rng(2)).features, s.features);
  // min mode selects per batch instead of per sample; with one restart both agree.
  EXPECT_EQ(pgd_solve(one, EnsembleMode::min, V, {0.2}, cfg, Rng(2)).features, s.features);
}

TEST(Pgd, CwMenuShapeAndStats) {
  const auto cfg = PgdConfig::cw_menu(3, 0.05, 2, 3);
  ASSERT_EQ(cfg.subroutines().size(), 4u);
  EXPECT_EQ(cfg.selection_loss(), LossSpec::confidence());
  const auto V = random_set(Rng(5), 12, 4, 3);
  PgdStats st;
  const auto A = pgd_solve(small_net(4), V, {0.2}, cfg, Rng(2), &st);
  EXPECT_EQ(st.candidates, 5u);
  EXPECT_EQ(st.gradient_steps, 15u);
  EXPECT_TRUE(PerturbationConstraint{0.2}.satisfied(A.features, V.features));
}

TEST(ModelSpace, ZeroIterationsCoincideWithTransfer) {
  const auto V = random_set(Rng(8), 16, 4, 3);
  const Classifier F0 = small_net(11);
  const PerturbationConstraint c{0.2};
  const auto cfg = short_pgd();
  const Rng attacker(21);
  const auto transfer = transfer_attack(F0, V, c, cfg, attacker);
  const auto f = fpa(toy_gamma(), V, F0, 0, c, cfg, attacker);
  const auto ga = gmsa(toy_gamma(), V, F0, 0, GmsaMode::avg, c, cfg, attacker);
  const auto gm = gmsa(toy_gamma(), V, F0, 0, GmsaMode::min, c, cfg, attacker);
  for (const auto* r : {&f, &ga, &gm}) {
    ASSERT_EQ(r->iterates.size(), 1u);
    EXPECT_EQ(r->selected, 0u);
    EXPECT_EQ(r->best().features, transfer.features) << r->method;
    EXPECT_EQ(r->losses, f.losses);
  }
}

TEST(ModelSpace, OneModelEnsembleObjectivesEqualTheAttackLoss) {
  const auto V = random_set(Rng(8), 16, 4, 3);
  const std::vector<Classifier> one{small_net(3)};
  const double la = evaluate_loss(one[0], V, LossSpec::cross_entropy());
  EXPECT_EQ(ensemble_objective(one, EnsembleMode::avg, V, LossSpec::cross_entropy()), la);
  EXPECT_EQ(ensemble_objective(one, EnsembleMode::min, V, LossSpec::cross_entropy()), la);
}

TEST(ModelSpace, SelectBestIterateExamples) {
  EXPECT_EQ(select_best_iterate(std::vector<double>{1, 3, 2}), 1u);
  EXPECT_EQ(select_best_iterate(std::vector<double>{2, 2}), 0u);
  EXPECT_EQ(select_best_iterate(std::vector<double>{std::nan(""), -5.0}), 1u);
  EXPECT_THROW(select_best_iterate(std::vector<double>{}), std::invalid_argument);
}

TEST(ModelSpace, RecordedLossesAndSelectionRecompute) {
  const auto V = random_set(Rng(9), 16, 4, 3);
  const Classifier F0 = small_net(12);
  const Rng attacker(22);
  const auto gamma = toy_gamma();
  for (const auto& rec : {fpa(gamma, V, F0, 3, {0.2}, short_pgd(), attacker),
                          gmsa(gamma, V, F0, 3, GmsaMode::avg, {0.2}, short_pgd(), attacker),
                          gmsa(gamma, V, F0, 3, GmsaMode::min, {0.2}, short_pgd(), attacker)}) {
    ASSERT_EQ(rec.iterates.size(), 4u);
    ASSERT_EQ(rec.model_fingerprints.size(), 5u);
    EXPECT_EQ(rec.model_fingerprints[0], F0.adapted_fingerprint());
    std::size_t best = 0;
    for (std::size_t i = 0; i < rec.iterates.size(); ++i) {
      const Classifier next = gamma(rec.iterates[i].features, attacker.derive("gamma", i));
      EXPECT_EQ(next.adapted_fingerprint(), rec.model_fingerprints[i + 1]);
      EXPECT_EQ(evaluate_loss(next, rec.iterates[i], LossSpec::cross_entropy()), rec.losses[i]);
      if (rec.losses[i] > rec.losses[best]) best = i;
      EXPECT_TRUE(PerturbationConstraint{0.2}.satisfied(rec.iterates[i].features, V.features));
    }
    EXPECT_EQ(rec.selected, best) << rec.method;
    EXPECT_EQ(&select_best_iterate(rec), &rec.iterates[best]);
  }
}

TEST(ModelSpace, MinModeScalesStepsWithHistory) {
  const auto V = random_set(Rng(9), 8, 4, 3);
  const auto cfg = short_pgd();
  const auto avg = gmsa(toy_gamma(), V, small_net(1), 3, GmsaMode::avg, {0.2}, cfg, Rng(4));
  const auto mn = gmsa(toy_gamma(), V, small_net(1), 3, GmsaMode::min, {0.2}, cfg, Rng(4));
  const auto f = fpa(toy_gamma(), V, small_net(1), 3, {0.2}, cfg, Rng(4));
  EXPECT_EQ(avg.pgd_steps, (std::vector<std::size_t>{5, 5, 5, 5}));
  EXPECT_EQ(f.pgd_steps, avg.pgd_steps);
  EXPECT_EQ(mn.pgd_steps, (std::vector<std::size_t>{5, 10, 15, 20}));
  EXPECT_EQ(avg.method, "gmsa-avg");
  EXPECT_EQ(mn.method, "gmsa-min");
  EXPECT_EQ(f.method, "fpa");
}

TEST(ModelSpace, IdentityDefenseIsAnImmediateFixedPoint) {
  const auto V = random_set(Rng(10), 12, 4, 3);
  const Classifier F0 = small_net(5);
  auto cfg = short_pgd();
  cfg.random_start = false;
  const DefenseSimulator none = [&](const Tensor&, Rng) { return F0; };
  const auto rec = fpa(none, V, F0, 3, {0.2}, cfg, Rng(6));
  for (std::size_t i = 1; i < rec.iterates.size(); ++i) {
    EXPECT_EQ(rec.iterates[i].features, rec.iterates[0].features);
    EXPECT_EQ(rec.losses[i], rec.losses[0]);
  }
  for (auto fp : rec.model_fingerprints) EXPECT_EQ(fp, F0.adapted_fingerprint());
  EXPECT_EQ(rec.selected, 0u);
}

TEST(ModelSpace, TransferAgainstZeroModelIsIdentity) {
  const auto V = random_set(Rng(10), 12, 4, 3);
  auto cfg = short_pgd();
  cfg.random_start = false;
  const auto out = transfer_attack(Classifier::zeros(Architecture::mlp(4, {8}, 3)), V, {0.3}, cfg, Rng(1));
  EXPECT_EQ(out.features, V.features);
}
