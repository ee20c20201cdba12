#pragma once

// Test-time adaptation of per-sample affine parameters (gamma_i, beta_i) of
// the norm layers; the backbone is frozen.

#include "tdrobust/diffcore/optim.hpp"
#include "tdrobust/nn/losses.hpp"

namespace tdr {

struct DentConfig {
  std::size_t steps = 6;
  std::size_t batch = 128;
  OptimizerSpec optimizer = OptimizerSpec::adam(0.006);
};

namespace detail {

inline PerSampleAffine slice_affine(const PerSampleAffine& a, std::size_t begin, std::size_t end) {
  PerSampleAffine out;
  for (std::size_t l = 0; l < a.gamma.size(); ++l) {
    out.gamma.push_back(a.gamma[l].slice_rows(begin, end));
    out.beta.push_back(a.beta[l].slice_rows(begin, end));
  }
  return out;
}

/// Minimises entropy_infomax over the tables of one batch. Returns the
/// objective before the first step and after the last.
inline std::pair<double, double> adapt_batch(Classifier& model, const Tensor& x, const DentConfig& cfg) {
  ParamSet tables;
  const PerSampleAffine& ps = *model.per_sample();
  for (std::size_t l = 0; l < ps.gamma.size(); ++l) {
    tables.add("g" + std::to_string(l), ps.gamma[l], ParamRole::affine);
    tables.add("b" + std::to_string(l), ps.beta[l], ParamRole::affine);
  }
  Optimizer opt(cfg.optimizer);
  double first = 0.0, last = 0.0;
  for (std::size_t s = 0; s <= cfg.steps; ++s) {
    Tape t;
    auto b = model.bind(t, false, true);
    Var obj = entropy_infomax(model.forward(t, b, t.constant(x)).logits);
    last = obj.value()[0];
    if (s == 0) first = last;
    if (s == cfg.steps) break;
    t.backward(obj);
    GradMap g;
    for (std::size_t l = 0; l < b.ps_gamma.size(); ++l) {
      g["g" + std::to_string(l)] = t.grad(b.ps_gamma[l]);
      g["b" + std::to_string(l)] = t.grad(b.ps_beta[l]);
    }
    if (!opt.step(tables, g)) throw std::runtime_error("DENT: non-finite adaptation gradient");
    PerSampleAffine next;
    for (std::size_t l = 0; l < ps.gamma.size(); ++l) {
      next.gamma.push_back(tables.at("g" + std::to_string(l)));
      next.beta.push_back(tables.at("b" + std::to_string(l)));
    }
    model.set_per_sample(std::move(next));
  }
  return {first, last};
}

}  // namespace detail

struct DentTrace {
  std::vector<double> objective_before;  // one per batch
  std::vector<double> objective_after;
};

/// Adapts per-sample affine parameters on consecutive batches of U (in the
/// given order) and returns a model whose row i uses (gamma_i, beta_i).
inline Classifier dent_adapt(const Classifier& base, const Tensor& U, const DentConfig& cfg, DentTrace* trace = nullptr) {
  if (!base.has_affine_slots()) throw std::invalid_argument("DENT needs a model with norm-layer affine parameters");
  if (cfg.batch == 0) throw std::invalid_argument("DENT batch size must be positive");
  const std::size_t n = U.rows();
  Classifier out = base;
  out.clear_per_sample();
  const PerSampleAffine init = out.expand_affine(n);
  PerSampleAffine adapted = init;
  for (std::size_t b = 0; b < n; b += cfg.batch) {
    const std::size_t e = std::min(n, b + cfg.batch);
    Classifier work = out;
    work.set_per_sample(detail::slice_affine(init, b, e));
    const auto [before, after] = detail::adapt_batch(work, U.slice_rows(b, e), cfg);
    if (trace) {
      trace->objective_before.push_back(before);
      trace->objective_after.push_back(after);
    }
    const PerSampleAffine& got = *work.per_sample();
    for (std::size_t l = 0; l < got.gamma.size(); ++l)
      for (std::size_t r = b; r < e; ++r)
        for (std::size_t c = 0; c < got.gamma[l].cols(); ++c) {
          adapted.gamma[l].at(r, c) = got.gamma[l].at(r - b, c);
          adapted.beta[l].at(r, c) = got.beta[l].at(r - b, c);
        }
  }
  out.set_per_sample(std::move(adapted));
  return out;
}

}  // namespace tdr
