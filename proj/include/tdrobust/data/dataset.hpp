#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tdrobust/diffcore/tensor.hpp"

namespace tdr {

/// Labeled features V with every feature inside [0,1].
struct LabeledSet {
  Tensor features;          // [n, d]
  std::vector<int> labels;  // n entries in [0, num_classes)
  std::size_t num_classes = 0;
  std::string provenance;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }

  /// U = V|_X.
  const Tensor& unlabeled() const { return features; }

  LabeledSet subset(std::span<const std::size_t> idx, std::string tag = {}) const {
    LabeledSet out;
    out.features = features.gather_rows(idx);
    out.labels.reserve(idx.size());
    for (std::size_t i : idx) out.labels.push_back(labels.at(i));
    out.num_classes = num_classes;
    out.provenance = tag.empty() ? provenance : provenance + "/" + tag;
    return out;
  }

  LabeledSet slice(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    return subset(idx);
  }

  /// Same labels, new features (e.g. an adversarial copy).
  LabeledSet with_features(Tensor x, std::string tag) const {
    if (x.rows() != size() || x.cols() != dim()) throw ShapeError("with_features: shape mismatch");
    LabeledSet out{std::move(x), labels, num_classes, provenance + "/" + tag};
    return out;
  }

  void validate() const {
    if (labels.empty()) throw std::invalid_argument("labeled set is empty");
    if (features.rank() != 2 || features.rows() != labels.size())
      throw ShapeError("labeled set: features " + shape_str(features.shape()) + " vs " + std::to_string(labels.size()) +
                       " labels");
    for (int y : labels)
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw std::invalid_argument("label out of range");
    for (double v : features.values())
      if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("feature outside the [0,1] box");
  }

  std::uint64_t digest() const {
    std::uint64_t h = features.digest();
    return fnv1a_bytes(labels.data(), labels.size() * sizeof(int), h);
  }
};

/// Splits of one drawn pool.
struct Splits {
  LabeledSet train;
  LabeledSet val;
  LabeledSet test;
};

/// A seeded permutation of [0, n) cut into consecutive batches of `batch`
/// (the last one may be short).
template <class Urbg>
std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, std::size_t batch, Urbg& rng) {
  if (batch == 0) throw std::invalid_argument("batch size must be positive");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
    std::swap(perm[i - 1], perm[j]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n; b += batch)
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(b), perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + batch)));
  return out;
}

inline LabeledSet concat(const LabeledSet& a, const LabeledSet& b) {
  if (a.num_classes != b.num_classes) throw std::invalid_argument("concat: class count mismatch");
  LabeledSet out{concat_rows(a.features, b.features), a.labels, a.num_classes, a.provenance + "+" + b.provenance};
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

}  // namespace tdr
