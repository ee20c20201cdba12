#pragma once

#include <filesystem>

#include "tdrobust/data/idx.hpp"
#include "tdrobust/rng.hpp"

namespace tdr {

struct SplitSizes {
  std::size_t train = 2000;
  std::size_t val = 500;
  std::size_t test = 500;
};

/// Class-stratified disjoint splits: each split takes size/C points per class
/// (remainders go to the lowest classes), drawn from a seeded per-class
/// shuffle; each split is then shuffled.
inline Splits stratified_split(const LabeledSet& pool, SplitSizes sizes, Rng rng) {
  const std::size_t C = pool.num_classes;
  std::vector<std::vector<std::size_t>> by_class(C);
  for (std::size_t i = 0; i < pool.size(); ++i) by_class[static_cast<std::size_t>(pool.labels[i])].push_back(i);
  for (auto& v : by_class) std::shuffle(v.begin(), v.end(), rng);
  std::vector<std::size_t> cursor(C, 0);
  auto take = [&](std::size_t total, const char* tag) {
    std::vector<std::size_t> idx;
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t want = total / C + (c < total % C ? 1 : 0);
      if (cursor[c] + want > by_class[c].size())
        throw std::invalid_argument("class " + std::to_string(c) + " has too few samples for the requested splits");
      idx.insert(idx.end(), by_class[c].begin() + static_cast<std::ptrdiff_t>(cursor[c]),
                 by_class[c].begin() + static_cast<std::ptrdiff_t>(cursor[c] + want));
      cursor[c] += want;
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    return pool.subset(idx, tag);
  };
  Splits s;
  s.train = take(sizes.train, "train");
  s.val = take(sizes.val, "val");
  s.test = take(sizes.test, "test");
  return s;
}

inline std::filesystem::path mnist_lite_dir(const std::filesystem::path& data_root) { return data_root / "mnist-lite"; }

inline LabeledSet load_mnist_lite_pool(const std::filesystem::path& data_root) {
  const auto dir = mnist_lite_dir(data_root);
  LabeledSet s = load_idx((dir / "mnist5k-images-idx3-ubyte").string(), (dir / "mnist5k-labels-idx1-ubyte").string());
  s.provenance = "mnist-lite";
  return s;
}

inline Splits load_mnist_lite(const std::filesystem::path& data_root, SplitSizes sizes, Rng rng) {
  return stratified_split(load_mnist_lite_pool(data_root), sizes, std::move(rng));
}

}  // namespace tdr
