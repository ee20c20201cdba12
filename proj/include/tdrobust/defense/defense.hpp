#pragma once

// The defense contract Gamma(F, D, U') shared by the game engine and the
// attacker's simulations.

#include <memory>

#include "tdrobust/defense/dent.hpp"
#include "tdrobust/defense/rmc.hpp"
#include "tdrobust/defense/urejectron.hpp"

namespace tdr {

enum class DefenseKind { none, rmc, dent, dann, tadv, urejectron };

inline std::string defense_name(DefenseKind k) {
  switch (k) {
    case DefenseKind::none: return "none";
    case DefenseKind::rmc: return "rmc";
    case DefenseKind::dent: return "dent";
    case DefenseKind::dann: return "dann";
    case DefenseKind::tadv: return "tadv";
    case DefenseKind::urejectron: return "urejectron";
  }
  return "?";
}

inline DefenseKind parse_defense(const std::string& s) {
  for (auto k : {DefenseKind::none, DefenseKind::rmc, DefenseKind::dent, DefenseKind::dann, DefenseKind::tadv,
                 DefenseKind::urejectron})
    if (defense_name(k) == s) return k;
  throw std::invalid_argument("unknown defense '" + s + "'");
}

struct DefenseSpec {
  DefenseKind kind = DefenseKind::none;
  RmcConfig rmc;
  DentConfig dent;
  DannConfig dann;
  TrainConfig tadv;
  UrejectronConfig urejectron;

  bool stateful() const { return kind == DefenseKind::rmc; }
  std::string name() const { return defense_name(kind); }
};

/// One instance of Gamma bound to a base model and training set. adapt() is
/// pure; stateful defenses move on only through advance().
class Defense {
 public:
  virtual ~Defense() = default;
  virtual const DefenseSpec& spec() const = 0;
  virtual Classifier adapt(const Tensor& U, Rng rng) const = 0;
  virtual void advance(const Classifier&) {}
  /// The model adaptation starts from (state for RMC, the base model otherwise).
  virtual const Classifier& current() const = 0;
  /// False when Gamma ignores the test features (the result depends only on the randomness).
  virtual bool uses_test_inputs() const { return true; }
  virtual std::unique_ptr<Defense> clone() const = 0;
};

namespace detail {

template <class Self>
class DefenseBase : public Defense {
 public:
  DefenseBase(DefenseSpec spec, Classifier base, LabeledSet D) : spec_(std::move(spec)), base_(std::move(base)), D_(std::move(D)) {}
  const DefenseSpec& spec() const override { return spec_; }
  const Classifier& current() const override { return base_; }
  std::unique_ptr<Defense> clone() const override { return std::make_unique<Self>(static_cast<const Self&>(*this)); }

 protected:
  DefenseSpec spec_;
  Classifier base_;
  LabeledSet D_;
};

}  // namespace detail

class NoDefense final : public detail::DefenseBase<NoDefense> {
 public:
  using DefenseBase::DefenseBase;
  Classifier adapt(const Tensor&, Rng) const override { return base_; }
  bool uses_test_inputs() const override { return false; }
};

class DentDefense final : public detail::DefenseBase<DentDefense> {
 public:
  using DefenseBase::DefenseBase;
  Classifier adapt(const Tensor& U, Rng) const override { return dent_adapt(base_, U, spec_.dent); }
};

inline Classifier dann_defense(const LabeledSet& D, const Tensor& U_prime, const DannConfig& cfg, Rng rng) {
  return train_dann(D, U_prime, cfg, std::move(rng)).model;
}

/// Adversarial training from scratch with fresh randomness; the test features are unused.
inline Classifier tadv_retrain(const LabeledSet& D, const TrainConfig& cfg, Rng rng) {
  return train_adversarial(D, cfg, std::move(rng)).model;
}

class DannDefense final : public detail::DefenseBase<DannDefense> {
 public:
  using DefenseBase::DefenseBase;
  Classifier adapt(const Tensor& U, Rng rng) const override { return dann_defense(D_, U, spec_.dann, std::move(rng)); }
};

class TadvDefense final : public detail::DefenseBase<TadvDefense> {
 public:
  using DefenseBase::DefenseBase;
  Classifier adapt(const Tensor&, Rng rng) const override { return tadv_retrain(D_, spec_.tadv, std::move(rng)); }
  bool uses_test_inputs() const override { return false; }
};

/// The classifier half of URejectron (trained on D with fresh randomness);
/// rejection itself is scored with err_rej.
class UrejectronDefense final : public detail::DefenseBase<UrejectronDefense> {
 public:
  using DefenseBase::DefenseBase;
  Classifier adapt(const Tensor& U, Rng rng) const override {
    return urejectron_build(D_, U, spec_.urejectron, std::move(rng)).classifier;
  }
};

class RmcDefense final : public Defense {
 public:
  RmcDefense(DefenseSpec spec, RmcState state) : spec_(std::move(spec)), state_(std::move(state)) {}
  const DefenseSpec& spec() const override { return spec_; }
  Classifier adapt(const Tensor& U, Rng rng) const override { return state_.adapt(U, std::move(rng)); }
  void advance(const Classifier& adapted) override { state_.advance(adapted); }
  const Classifier& current() const override { return state_.current(); }
  std::unique_ptr<Defense> clone() const override { return std::make_unique<RmcDefense>(*this); }
  const RmcState& state() const { return state_; }

 private:
  DefenseSpec spec_;
  RmcState state_;
};

/// Builds Gamma for a base model and training set. `setup` drives public
/// construction randomness (the RMC augmented set), which both players may know.
inline std::unique_ptr<Defense> make_defense(const DefenseSpec& spec, const Classifier& base, const LabeledSet& D, Rng setup) {
  switch (spec.kind) {
    case DefenseKind::none: return std::make_unique<NoDefense>(spec, base, D);
    case DefenseKind::dent: return std::make_unique<DentDefense>(spec, base, D);
    case DefenseKind::dann: return std::make_unique<DannDefense>(spec, base, D);
    case DefenseKind::tadv: return std::make_unique<TadvDefense>(spec, base, D);
    case DefenseKind::urejectron: return std::make_unique<UrejectronDefense>(spec, base, D);
    case DefenseKind::rmc:
      return std::make_unique<RmcDefense>(spec, RmcState(rmc_augmented_set(base, D, spec.rmc, setup.derive("rmc-augment")),
                                                         base, spec.rmc));
  }
  throw std::invalid_argument("unknown defense kind");
}

}  // namespace tdr
