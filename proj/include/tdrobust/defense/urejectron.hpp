#pragma once

// Selective classification with a domain discriminator h: inputs whose
// "test-domain" score exceeds a threshold are rejected.

#include <algorithm>
#include <limits>

#include "tdrobust/train/trainers.hpp"

namespace tdr {

struct UrejectronConfig {
  TrainConfig classifier;
  TrainConfig discriminator;
  std::size_t sweep_points = 101;
};

struct Urejectron {
  Classifier classifier;     // trained on D_train
  Classifier discriminator;  // D_train -> 0, x_tilde -> 1

  /// Probability of the test-domain label; S(t) = {x : score(x) <= t}.
  std::vector<double> scores(const Tensor& x) const {
    const Tensor p = discriminator.probabilities(x);
    std::vector<double> s(x.rows());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = p.at(i, 1);
    return s;
  }
};

inline LabeledSet domain_set(const Tensor& source, const Tensor& target) {
  LabeledSet out{concat_rows(source, target), std::vector<int>(source.rows() + target.rows(), 0), 2, "domains"};
  std::fill(out.labels.begin() + static_cast<std::ptrdiff_t>(source.rows()), out.labels.end(), 1);
  return out;
}

inline Urejectron urejectron_build(const LabeledSet& D_train, const Tensor& x_tilde, const UrejectronConfig& cfg, Rng rng) {
  if (D_train.size() == 0 || x_tilde.rows() == 0) throw std::invalid_argument("URejectron needs nonempty train and test sets");
  const TrainConfig& hc = cfg.discriminator;
  if (hc.arch.num_classes() != 2) throw std::invalid_argument("URejectron discriminator must have two outputs");
  return {train_standard(D_train, cfg.classifier, rng.derive("classifier")).model,
          train_standard(domain_set(D_train.features, x_tilde), hc, rng.derive("discriminator")).model};
}

struct RejectionOutcome {
  double err = 0.0;  // accepted and misclassified, over |U'|
  double rej = 0.0;  // rejected clean points, over |U|
  double threshold = 0.0;
};

inline RejectionOutcome err_rej_from_scores(std::span<const int> pred_adv, std::span<const int> labels_adv,
                                            std::span<const double> score_adv, std::span<const double> score_clean,
                                            double threshold) {
  if (labels_adv.empty() || score_clean.empty()) throw std::invalid_argument("err_rej: empty U' or U");
  std::size_t wrong = 0, rejected = 0;
  for (std::size_t i = 0; i < labels_adv.size(); ++i) wrong += score_adv[i] <= threshold && pred_adv[i] != labels_adv[i];
  for (double s : score_clean) rejected += !(s <= threshold);
  return {static_cast<double>(wrong) / static_cast<double>(labels_adv.size()),
          static_cast<double>(rejected) / static_cast<double>(score_clean.size()), threshold};
}

/// err = |{x' in U' with h(x') <= t and F(x') != y}| / |U'|,  rej = |{x in U : h(x) > t}| / |U|.
inline RejectionOutcome err_rej(const Classifier& F, const Urejectron& r, double threshold, const LabeledSet& U_prime,
                                const Tensor& U_clean) {
  if (U_prime.size() == 0 || U_clean.rows() == 0) throw std::invalid_argument("err_rej: empty U' or U");
  const auto pred = F.predict(U_prime.features);
  return err_rej_from_scores(pred, U_prime.labels, r.scores(U_prime.features), r.scores(U_clean), threshold);
}

/// Thresholds at `points` evenly spaced quantiles of the clean scores
/// (lower-interpolated order statistics), ascending.
inline std::vector<double> quantile_thresholds(std::vector<double> clean_scores, std::size_t points) {
  if (points < 2) throw std::invalid_argument("threshold sweep needs at least two points");
  std::sort(clean_scores.begin(), clean_scores.end());
  std::vector<double> t(points);
  const std::size_t n = clean_scores.size();
  for (std::size_t i = 0; i < points; ++i) {
    const double q = static_cast<double>(i) / static_cast<double>(points - 1);
    t[i] = clean_scores[static_cast<std::size_t>(std::floor(q * static_cast<double>(n - 1)))];
  }
  return t;
}

/// The (threshold, rej, err) curve over quantile thresholds of h on the clean set.
inline std::vector<RejectionOutcome> rejection_curve(const Classifier& F, const Urejectron& r, const LabeledSet& U_prime,
                                                     const Tensor& U_clean, std::size_t points = 101) {
  const auto pred = F.predict(U_prime.features);
  const auto sa = r.scores(U_prime.features), sc = r.scores(U_clean);
  std::vector<RejectionOutcome> out;
  for (double t : quantile_thresholds(sc, points)) out.push_back(err_rej_from_scores(pred, U_prime.labels, sa, sc, t));
  return out;
}

/// Probability that a random positive scores above a random negative (ties 1/2).
inline double auc(std::span<const double> negatives, std::span<const double> positives) {
  if (negatives.empty() || positives.empty()) throw std::invalid_argument("auc: empty class");
  std::vector<double> neg(negatives.begin(), negatives.end());
  std::sort(neg.begin(), neg.end());
  double total = 0.0;
  for (double p : positives) {
    const auto lo = std::lower_bound(neg.begin(), neg.end(), p);
    const auto hi = std::upper_bound(neg.begin(), neg.end(), p);
    total += static_cast<double>(lo - neg.begin()) + 0.5 * static_cast<double>(hi - lo);
  }
  return total / (static_cast<double>(neg.size()) * static_cast<double>(positives.size()));
}

/// Lowest-error operating point among those with rej <= max_rej.
inline std::optional<RejectionOutcome> best_at_rejection(const std::vector<RejectionOutcome>& curve, double max_rej) {
  std::optional<RejectionOutcome> best;
  for (const auto& o : curve)
    if (o.rej <= max_rej && (!best || o.err < best->err)) best = o;
  return best;
}

/// Writes threshold,rej,err rows.
inline void write_rejection_curve_csv(const std::string& path, const std::vector<RejectionOutcome>& curve) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write curve '" + path + "'");
  os.precision(17);
  os << "threshold,rej,err\n";
  for (const auto& o : curve) os << o.threshold << ',' << o.rej << ',' << o.err << '\n';
}

}  // namespace tdr
