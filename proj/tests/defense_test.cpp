#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "tdrobust/attack/pgd.hpp"
#include "tdrobust/data/blobs.hpp"
#include "tdrobust/data/mnist_lite.hpp"
#include "tdrobust/defense/defense.hpp"

using namespace tdr;

namespace {

Tensor random_features(Rng rng, std::size_t n, std::size_t d) {
  Tensor x({n, d});
  for (auto& v : x.storage()) v = rng.uniform(0.0, 1.0);
  return x;
}

LabeledSet random_set(Rng rng, std::size_t n, std::size_t d, std::size_t classes) {
  LabeledSet V{random_features(rng.derive("x"), n, d), std::vector<int>(n), classes, "rand"};
  Rng ly = rng.derive("y");
  for (auto& y : V.labels) y = static_cast<int>(ly.index(classes));
  return V;
}

/// Brute-force K nearest: full distance table, stable sort by (distance, index).
std::vector<std::size_t> brute_nearest(const Tensor& pool, const std::vector<double>& q, std::size_t k) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t i = 0; i < pool.rows(); ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < pool.cols(); ++c) s += (pool.at(i, c) - q[c]) * (pool.at(i, c) - q[c]);
    all.emplace_back(s, i);
  }
  std::stable_sort(all.begin(), all.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(all[i].second);
  return out;
}

TrainConfig blob_cfg(std::size_t epochs = 10) {
  TrainConfig c;
  c.arch = Architecture::mlp(2, {16, 16}, 2);
  c.epochs = epochs;
  c.batch = 32;
  c.optimizer = OptimizerSpec::adam(1e-2);
  return c;
}

}  // namespace

// ---- DENT ----

TEST(Dent, ZeroStepsKeepsBasePredictions) {
  const Classifier base = Classifier::init(Architecture::mlp(5, {8, 8}, 3), Rng(1));
  const Tensor U = random_features(Rng(2), 40, 5);
  DentConfig cfg;
  cfg.steps = 0;
  const Classifier adapted = dent_adapt(base, U, cfg);
  EXPECT_EQ(adapted.predict(U), base.predict(U));
  const Tensor a = adapted.logits(U), b = base.logits(U);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Dent, ObjectiveDoesNotIncreaseInMostTrials) {
  int ok = 0;
  const int trials = 100;
  for (int t = 0; t < trials; ++t) {
    const Classifier base = Classifier::init(Architecture::mlp(6, {16, 8}, 4), Rng(100 + t));
    DentTrace trace;
    dent_adapt(base, random_features(Rng(500 + t), 64, 6), DentConfig{}, &trace);
    ASSERT_EQ(trace.objective_before.size(), 1u);
    ok += trace.objective_after[0] <= trace.objective_before[0];
  }
  EXPECT_GE(ok, 95);
}

TEST(Dent, BackboneFingerprintIsInvariant) {
  const Classifier base = Classifier::init(Architecture::mlp(5, {8, 8}, 3), Rng(3));
  const Classifier adapted = dent_adapt(base, random_features(Rng(4), 30, 5), DentConfig{});
  EXPECT_EQ(adapted.fingerprint(), base.fingerprint());
  EXPECT_NE(adapted.adapted_fingerprint(), base.adapted_fingerprint());
}

TEST(Dent, RowsDependOnlyOnTheirOwnBatch) {
  const Classifier base = Classifier::init(Architecture::mlp(5, {8, 8}, 3), Rng(5));
  const Tensor U = random_features(Rng(6), 20, 5);
  DentConfig cfg;
  cfg.batch = 8;
  DentTrace trace;
  const Classifier whole = dent_adapt(base, U, cfg, &trace);
  EXPECT_EQ(trace.objective_before.size(), 3u);
  const Tensor head = U.slice_rows(0, 8);
  const Classifier part = dent_adapt(base, head, cfg);
  const Tensor a = whole.logits(U), b = part.logits(head);
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Dent, RejectsModelsWithoutSlotsAndEmptyBatches) {
  const Tensor U = random_features(Rng(6), 4, 5);
  EXPECT_THROW(dent_adapt(Classifier::init(Architecture::mlp(5, {8}, 3, false), Rng(1)), U, DentConfig{}),
               std::invalid_argument);
  DentConfig cfg;
  cfg.batch = 0;
  EXPECT_THROW(dent_adapt(Classifier::init(Architecture::mlp(5, {8}, 3), Rng(1)), U, cfg), std::invalid_argument);
}

// ---- RMC ----

TEST(Rmc, NeighbourSelectionMatchesBruteForce) {
  Rng rng(7);
  for (std::size_t n : {100u, 1000u}) {
    const Tensor pool = random_features(rng.derive("pool", n), n, 5);
    for (int q = 0; q < 10; ++q) {
      Rng rq = rng.derive("query").derive(n * 100 + q);
      std::vector<double> query(5);
      for (auto& v : query) v = rq.uniform(0.0, 1.0);
      for (std::size_t k : {std::size_t{1}, std::size_t{7}, std::size_t{64}, n})
        EXPECT_EQ(nearest_rows(pool, query, k), brute_nearest(pool, query, k)) << "n=" << n << " k=" << k;
    }
  }
}

TEST(Rmc, TiesGoToTheSmallerIndex) {
  const Tensor pool({4, 1}, {0.5, 0.3, 0.7, 0.3});
  EXPECT_EQ(nearest_rows(pool, std::vector<double>{0.3}, 2), (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(nearest_rows(pool, std::vector<double>{0.4}, 3), (std::vector<std::size_t>{0, 1, 3}));
}

TEST(Rmc, StateNeighboursUsePenultimateFeatures) {
  const Classifier model = Classifier::init(Architecture::mlp(4, {12, 6}, 3), Rng(8));
  const LabeledSet D = random_set(Rng(9), 300, 4, 3);
  RmcConfig cfg;
  cfg.k = 10;
  const RmcState st(D, model, cfg);
  const Tensor F = model.features(D.features);
  for (int q = 0; q < 10; ++q) {
    const Tensor x = random_features(Rng(40 + q), 1, 4);
    EXPECT_EQ(st.neighbors(x.row(0)), brute_nearest(F, model.features(x).storage(), 10));
  }
}

TEST(Rmc, MemberQueryWithSingleNeighbourSelectsItself) {
  const LabeledSet D = random_set(Rng(10), 100, 4, 3);
  RmcConfig cfg;
  cfg.k = 1;
  const RmcState st(D, Classifier::init(Architecture::mlp(4, {12, 6}, 3), Rng(11)), cfg);
  for (std::size_t j : {0u, 17u, 99u}) EXPECT_EQ(st.neighbors(D.features.row(j)), std::vector<std::size_t>{j});
}

TEST(Rmc, FullNeighbourhoodCoversTheAugmentedSet) {
  const LabeledSet D = random_set(Rng(12), 50, 4, 3);
  RmcConfig cfg;
  cfg.k = 50;
  const RmcState st(D, Classifier::init(Architecture::mlp(4, {12, 6}, 3), Rng(13)), cfg);
  auto nb = st.neighbors(D.features.row(3));
  std::sort(nb.begin(), nb.end());
  std::vector<std::size_t> all(50);
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(nb, all);
}

TEST(Rmc, NeighbourCountOutOfRangeRejected) {
  const LabeledSet D = random_set(Rng(14), 20, 4, 3);
  const Classifier m = Classifier::init(Architecture::mlp(4, {8}, 3), Rng(1));
  RmcConfig cfg;
  cfg.k = 21;
  EXPECT_THROW(RmcState(D, m, cfg), std::invalid_argument);
  cfg.k = 0;
  EXPECT_THROW(RmcState(D, m, cfg), std::invalid_argument);
}

TEST(Rmc, AugmentedSetShape) {
  const LabeledSet D = random_set(Rng(15), 40, 4, 3);
  const Classifier m = Classifier::init(Architecture::mlp(4, {8}, 3), Rng(2));
  RmcConfig cfg;
  cfg.adv_multiplier = 2;
  cfg.adversary = AdversarySpec::linf(0.1, 0.02, 5);
  const LabeledSet A = rmc_augmented_set(m, D, cfg, Rng(3));
  ASSERT_EQ(A.size(), 3 * D.size());
  EXPECT_NO_THROW(A.validate());
  EXPECT_EQ(A.features.slice_rows(0, 40), D.features);
  for (std::size_t c = 1; c < 3; ++c) {
    EXPECT_TRUE(cfg.adversary.constraint.satisfied(A.features.slice_rows(40 * c, 40 * (c + 1)), D.features));
    EXPECT_TRUE(std::equal(D.labels.begin(), D.labels.end(), A.labels.begin() + 40 * static_cast<std::ptrdiff_t>(c)));
  }
  EXPECT_NE(A.features.slice_rows(40, 80), A.features.slice_rows(80, 120));
}

TEST(Rmc, AdaptionIsPureAndAdvanceMovesTheChain) {
  const LabeledSet D = random_set(Rng(16), 60, 4, 3);
  RmcConfig cfg;
  cfg.k = 16;
  cfg.finetune = {3, 2, 8, OptimizerSpec::adam(1e-2)};
  RmcState st(D, Classifier::init(Architecture::mlp(4, {8}, 3), Rng(4)), cfg);
  const auto fp0 = st.current().fingerprint();
  const Tensor x = random_features(Rng(17), 1, 4);
  const Classifier a1 = st.adapt(x, Rng(5)), a2 = st.adapt(x, Rng(5));
  EXPECT_EQ(a1.fingerprint(), a2.fingerprint());
  EXPECT_EQ(st.current().fingerprint(), fp0);
  st.advance(a1);
  EXPECT_EQ(st.current().fingerprint(), a1.fingerprint());
  EXPECT_THROW(st.adapt(random_features(Rng(18), 2, 4), Rng(5)), std::invalid_argument);
}

// ---- DANN / TADV ----

TEST(DannDefense, FreshSeedsGiveFreshModels) {
  const Splits s = gen_blobs(BlobsConfig::blobs2d(), Rng(20));
  DannConfig cfg;
  cfg.arch = Architecture::mlp(2, {16, 16}, 2);
  cfg.epochs = 2;
  cfg.batch = 32;
  const auto a = dann_defense(s.train, s.test.features, cfg, Rng(1));
  EXPECT_EQ(a.fingerprint(), dann_defense(s.train, s.test.features, cfg, Rng(1)).fingerprint());
  EXPECT_NE(a.fingerprint(), dann_defense(s.train, s.test.features, cfg, Rng(2)).fingerprint());
}

TEST(DannDefense, CleanTargetKeepsStandardAccuracy) {
  const Splits s = gen_blobs(BlobsConfig::blobs2d(), Rng(21));
  const auto base = train_standard(s.train, blob_cfg(20), Rng(1)).model;
  DannConfig cfg;
  cfg.arch = blob_cfg().arch;
  cfg.epochs = 20;
  cfg.batch = 32;
  cfg.optimizer = OptimizerSpec::adam(1e-2);
  const auto dann = dann_defense(s.train, s.test.features, cfg, Rng(2));
  EXPECT_NEAR(accuracy(dann, s.test), accuracy(base, s.test), 0.05);
}

TEST(DannDefense, AdaptsToTransferAttackSets) {
  const Splits s = load_mnist_lite(TDR_DATA_DIR, {2000, 500, 500}, Rng(1));
  TrainConfig tc;
  tc.arch = Architecture::mlp(784, {128, 64}, 10);
  tc.epochs = 20;
  const auto base = train_standard(s.train, tc, Rng(2)).model;
  PgdConfig pc;
  pc.step_size = 0.01;
  const LabeledSet adv = pgd_solve(base, s.test.slice(0, 200), {0.3}, pc, Rng(3));
  DannConfig cfg;
  cfg.arch = tc.arch;
  cfg.epochs = 20;
  const auto dann = dann_defense(s.train, adv.features, cfg, Rng(4));
  EXPECT_GE(accuracy(dann, adv), accuracy(base, adv) + 0.10);
}

TEST(TadvDefense, SeedsAndAccuracy) {
  const Splits s = gen_blobs(BlobsConfig::blobs2d(), Rng(23));
  TrainConfig cfg = blob_cfg(10);
  cfg.adversary = AdversarySpec::linf(0.05, 0.02, 5);
  const auto a = tadv_retrain(s.train, cfg, Rng(1));
  EXPECT_EQ(a.fingerprint(), tadv_retrain(s.train, cfg, Rng(1)).fingerprint());
  const auto b = tadv_retrain(s.train, cfg, Rng(2));
  EXPECT_NE(a.fingerprint(), b.fingerprint());
  EXPECT_NEAR(accuracy(a, s.test), accuracy(b, s.test), 0.02);
}

TEST(DefenseContract, KindsAndStatefulness) {
  const LabeledSet D = random_set(Rng(30), 40, 4, 3);
  const Classifier base = Classifier::init(Architecture::mlp(4, {8}, 3), Rng(1));
  for (auto k : {DefenseKind::none, DefenseKind::rmc, DefenseKind::dent, DefenseKind::dann, DefenseKind::tadv,
                 DefenseKind::urejectron}) {
    DefenseSpec spec;
    spec.kind = k;
    spec.rmc.k = 8;
    spec.rmc.adversary = AdversarySpec::linf(0.1, 0.05, 2);
    EXPECT_EQ(parse_defense(defense_name(k)), k);
    EXPECT_EQ(spec.stateful(), k == DefenseKind::rmc);
    const auto d = make_defense(spec, base, D, Rng(2));
    EXPECT_EQ(d->spec().kind, k);
    EXPECT_EQ(d->current().fingerprint(), base.fingerprint());
  }
  EXPECT_THROW(parse_defense("bpda"), std::invalid_argument);
  DefenseSpec none;
  const auto d = make_defense(none, base, D, Rng(2));
  EXPECT_EQ(d->adapt(D.features, Rng(9)).adapted_fingerprint(), base.adapted_fingerprint());
  EXPECT_FALSE(d->uses_test_inputs());
}

// ---- URejectron ----

namespace {

UrejectronConfig blob_urejectron() {
  UrejectronConfig cfg;
  cfg.classifier = blob_cfg(10);
  cfg.discriminator = blob_cfg(10);
  return cfg;
}

}  // namespace

TEST(Urejectron, IndistinguishableDomainsGiveChanceAuc) {
  const Splits s = gen_blobs(BlobsConfig::blobs2d(), Rng(40));
  const auto same = urejectron_build(s.train, s.train.features, blob_urejectron(), Rng(1));
  const auto sc = same.scores(s.train.features);
  EXPECT_DOUBLE_EQ(auc(sc, sc), 0.5);
  // A fresh draw from the same distribution is no easier to tell apart.
  const auto fresh = urejectron_build(s.train, s.test.features, blob_urejectron(), Rng(1));
  EXPECT_NEAR(auc(fresh.scores(s.train.features), fresh.scores(s.test.features)), 0.5, 0.1);
}

TEST(Urejectron, LargeShiftIsSeparated) {
  BlobsConfig far = BlobsConfig::blobs2d(0.05);
  far.means = {{0.2, 0.2}, {0.3, 0.3}};
  const Splits s = gen_blobs(far, Rng(41));
  BlobsConfig moved = far;
  moved.means = {{0.8, 0.8}, {0.7, 0.7}};
  const Splits t = gen_blobs(moved, Rng(42));
  const auto r = urejectron_build(s.train, t.test.features, blob_urejectron(), Rng(2));
  EXPECT_GT(auc(r.scores(s.test.features), r.scores(t.test.features)), 0.95);
}

TEST(Urejectron, InfiniteThresholdAcceptsEverything) {
  const Splits s = gen_blobs(BlobsConfig::blobs2d(), Rng(43));
  const auto r = urejectron_build(s.train, s.test.features, blob_urejectron(), Rng(3));
  const auto o = err_rej(r.classifier, r, std::numeric_limits<double>::infinity(), s.test, s.val.features);
  EXPECT_EQ(o.rej, 0.0);
  EXPECT_DOUBLE_EQ(o.err, 1.0 - accuracy(r.classifier, s.test));
  EXPECT_THROW(urejectron_build(s.train, Tensor({0, 2}), blob_urejectron(), Rng(3)), std::invalid_argument);
}

TEST(ErrRej, ExamplesFromTheDefinition) {
  const std::vector<int> pred{0, 1, 1, 0}, labels{0, 0, 1, 1};
  const std::vector<double> score_adv{0.1, 0.2, 0.3, 0.9};  // last one rejected at t = 0.5
  const std::vector<double> score_clean{0.1, 0.6, 0.2, 0.3};
  const auto o = err_rej_from_scores(pred, labels, score_adv, score_clean, 0.5);
  EXPECT_DOUBLE_EQ(o.err, 0.25);
  EXPECT_DOUBLE_EQ(o.rej, 0.25);
  EXPECT_THROW(err_rej_from_scores({}, {}, {}, score_clean, 0.5), std::invalid_argument);
}

TEST(ErrRej, MatchesDoubleLoopOracle) {
  Rng rng(50);
  for (int inst = 0; inst < 50; ++inst) {
    Rng r = rng.derive(inst);
    const std::size_t d = 2 + r.index(4), classes = 2 + r.index(3);
    const Classifier F = Classifier::init(Architecture::mlp(d, {6}, classes), r.derive("F"));
    const Urejectron h{F, Classifier::init(Architecture::mlp(d, {6}, 2), r.derive("h"))};
    const LabeledSet Up = random_set(r.derive("Up"), 5 + r.index(40), d, classes);
    const Tensor U = random_features(r.derive("U"), 5 + r.index(40), d);
    const double t = r.uniform(0.0, 1.0);
    std::size_t wrong = 0, rejected = 0;
    for (std::size_t i = 0; i < Up.size(); ++i) {
      const Tensor xi = Up.features.slice_rows(i, i + 1);
      if (h.discriminator.probabilities(xi).at(0, 1) <= t && F.predict(xi)[0] != Up.labels[i]) ++wrong;
    }
    for (std::size_t i = 0; i < U.rows(); ++i)
      if (h.discriminator.probabilities(U.slice_rows(i, i + 1)).at(0, 1) > t) ++rejected;
    const auto o = err_rej(F, h, t, Up, U);
    EXPECT_EQ(o.err, static_cast<double>(wrong) / static_cast<double>(Up.size())) << inst;
    EXPECT_EQ(o.rej, static_cast<double>(rejected) / static_cast<double>(U.rows())) << inst;
  }
}

TEST(ErrRej, CurveIsMonotone) {
  for (int inst = 0; inst < 10; ++inst) {
    Rng r(60 + inst);
    const Classifier F = Classifier::init(Architecture::mlp(3, {6}, 3), r.derive("F"));
    const Urejectron h{F, Classifier::init(Architecture::mlp(3, {6}, 2), r.derive("h"))};
    const auto curve = rejection_curve(F, h, random_set(r.derive("Up"), 50, 3, 3), random_features(r.derive("U"), 50, 3));
    ASSERT_EQ(curve.size(), 101u);
    for (std::size_t i = 1; i < curve.size(); ++i) {
      EXPECT_GE(curve[i].threshold, curve[i - 1].threshold);
      EXPECT_LE(curve[i].rej, curve[i - 1].rej);
      EXPECT_GE(curve[i].err, curve[i - 1].err);
    }
    EXPECT_EQ(curve.back().rej, 0.0);
  }
}

TEST(ErrRej, AucAndOperatingPointHelpers) {
  EXPECT_DOUBLE_EQ(auc(std::vector<double>{0.1, 0.2}, std::vector<double>{0.3}), 1.0);
  EXPECT_DOUBLE_EQ(auc(std::vector<double>{0.3}, std::vector<double>{0.1, 0.2}), 0.0);
  EXPECT_DOUBLE_EQ(auc(std::vector<double>{0.5}, std::vector<double>{0.5}), 0.5);
  EXPECT_EQ(quantile_thresholds({3, 1, 2}, 3), (std::vector<double>{1, 2, 3}));
  const std::vector<RejectionOutcome> curve{{0.1, 0.5, 0.3}, {0.2, 0.08, 0.2}, {0.3, 0.0, 0.1}};
  ASSERT_TRUE(best_at_rejection(curve, 0.1).has_value());
  EXPECT_DOUBLE_EQ(best_at_rejection(curve, 0.1)->threshold, 0.2);
  EXPECT_FALSE(best_at_rejection({{0.1, 0.5, 0.3}}, 0.1).has_value());
}
