#pragma once

#include <algorithm>

#include "tdrobust/data/dataset.hpp"

namespace tdr {

/// Additive brightening by `severity`, clipped to [0,1]. Labels unchanged.
inline LabeledSet corrupt_brightness(const LabeledSet& V, double severity) {
  if (!(severity >= 0.0)) throw std::invalid_argument("brightness severity must be >= 0");
  Tensor x = V.features;
  for (auto& v : x.storage()) v = std::clamp(v + severity, 0.0, 1.0);
  return V.with_features(std::move(x), "brightness");
}

}  // namespace tdr
