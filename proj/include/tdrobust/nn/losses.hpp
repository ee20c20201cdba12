#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "tdrobust/data/dataset.hpp"
#include "tdrobust/nn/classifier.hpp"

namespace tdr {

enum class LossKind { cross_entropy, cw_untargeted, cw_targeted, confidence, entropy_infomax };

struct LossSpec {
  LossKind kind = LossKind::cross_entropy;
  int target = -1;  // cw_targeted only

  static LossSpec cross_entropy() { return {LossKind::cross_entropy}; }
  static LossSpec cw_untargeted() { return {LossKind::cw_untargeted}; }
  static LossSpec cw_targeted(int t) { return {LossKind::cw_targeted, t}; }
  static LossSpec confidence() { return {LossKind::confidence}; }
  static LossSpec entropy_infomax() { return {LossKind::entropy_infomax}; }

  std::string name() const {
    switch (kind) {
      case LossKind::cross_entropy: return "ce";
      case LossKind::cw_untargeted: return "cw";
      case LossKind::cw_targeted: return "cw-t" + std::to_string(target);
      case LossKind::confidence: return "confidence";
      case LossKind::entropy_infomax: return "entropy-infomax";
    }
    return "?";
  }

  static LossSpec parse(const std::string& s) {
    if (s == "ce" || s == "cross-entropy") return cross_entropy();
    if (s == "cw" || s == "cw-untargeted") return cw_untargeted();
    if (s == "confidence") return confidence();
    if (s.rfind("cw-t", 0) == 0) return cw_targeted(std::stoi(s.substr(4)));
    throw std::invalid_argument("unknown loss '" + s + "'");
  }

  friend bool operator==(const LossSpec&, const LossSpec&) = default;
};

/// Per-sample loss terms. Excluded samples contribute exactly 0 to `values`.
struct PerSampleLoss {
  Var values;  // [n]
  std::vector<char> included;
  std::size_t count = 0;
};

/// Per-sample terms of a supervised loss on logits [n, C].
inline PerSampleLoss per_sample_loss(const LossSpec& spec, Var logits, std::span<const int> labels) {
  const auto& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size()) throw ShapeError("loss: logits/labels mismatch");
  const std::size_t n = s[0], C = s[1];
  PerSampleLoss out;
  out.included.assign(n, 1);
  out.count = n;
  switch (spec.kind) {
    case LossKind::cross_entropy:
      out.values = ops::neg(ops::pick(ops::log_softmax(logits), labels));
      break;
    case LossKind::cw_untargeted:
      if (C < 2) throw std::invalid_argument("cw loss needs at least two classes");
      out.values = ops::sub(ops::max_excluding(logits, labels), ops::pick(logits, labels));
      break;
    case LossKind::cw_targeted: {
      if (spec.target < 0 || static_cast<std::size_t>(spec.target) >= C) throw std::invalid_argument("cw target out of range");
      std::vector<int> t(n), y(n);
      out.count = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const bool keep = labels[i] != spec.target;
        out.included[i] = keep;
        out.count += keep;
        t[i] = keep ? spec.target : -1;
        y[i] = keep ? labels[i] : -1;
      }
      out.values = ops::sub(ops::pick(logits, t), ops::pick(logits, y));
      break;
    }
    case LossKind::confidence:
      out.values = ops::max_excluding(ops::softmax(logits), labels);
      break;
    case LossKind::entropy_infomax:
      throw std::invalid_argument("entropy-infomax is unsupervised; use entropy_infomax()");
  }
  return out;
}

/// Mean over included samples. Throws if every sample is excluded.
inline Var batch_loss(const LossSpec& spec, Var logits, std::span<const int> labels) {
  PerSampleLoss p = per_sample_loss(spec, logits, labels);
  if (p.count == 0) throw std::invalid_argument("loss " + spec.name() + ": every sample excluded (target equals label)");
  return ops::scale(ops::sum(p.values), 1.0 / static_cast<double>(p.count));
}

/// sum_i H(f(x_i)) + sum_c S_c log S_c with S_c = sum_i f(x_i)_c.
inline Var entropy_infomax(Var logits) {
  Var f = ops::softmax(logits);
  Var entropy = ops::neg(ops::sum(ops::mul(f, ops::log_softmax(logits))));
  Var s = ops::sum_rows(f);
  return ops::add(entropy, ops::sum(ops::xlogx(s)));
}

/// Model-level evaluation of a supervised loss (eval mode, no gradient).
inline double evaluate_loss(const Classifier& model, const LabeledSet& V, const LossSpec& spec) {
  Tape t;
  auto b = model.bind(t, false);
  Var z = model.forward(t, b, t.constant(V.features)).logits;
  return batch_loss(spec, z, V.labels).value()[0];
}

inline double cross_entropy(const Classifier& m, const LabeledSet& V) { return evaluate_loss(m, V, LossSpec::cross_entropy()); }
inline double cw_untargeted(const Classifier& m, const LabeledSet& V) { return evaluate_loss(m, V, LossSpec::cw_untargeted()); }
inline double cw_targeted(const Classifier& m, const LabeledSet& V, int t) { return evaluate_loss(m, V, LossSpec::cw_targeted(t)); }
inline double confidence_loss(const Classifier& m, const LabeledSet& V) { return evaluate_loss(m, V, LossSpec::confidence()); }

inline double entropy_infomax(const Classifier& m, const Tensor& U) {
  Tape t;
  auto b = m.bind(t, false);
  return entropy_infomax(m.forward(t, b, t.constant(U)).logits).value()[0];
}

inline double accuracy(const Classifier& m, const LabeledSet& V) {
  const auto pred = m.predict(V.features);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == V.labels[i];
  return static_cast<double>(ok) / static_cast<double>(V.size());
}

}  // namespace tdr
