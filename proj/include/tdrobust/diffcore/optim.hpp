#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "tdrobust/diffcore/params.hpp"

namespace tdr {

enum class OptimizerKind { plain_sgd, momentum_sgd, adam };

struct OptimizerSpec {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double momentum = 0.9;
  bool nesterov = true;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static OptimizerSpec sgd(double lr) { return {OptimizerKind::plain_sgd, lr}; }
  static OptimizerSpec momentum_sgd(double lr, double momentum = 0.9, bool nesterov = true, double wd = 0.0) {
    OptimizerSpec s{OptimizerKind::momentum_sgd, lr, wd};
    s.momentum = momentum;
    s.nesterov = nesterov;
    return s;
  }
  static OptimizerSpec adam(double lr, double wd = 0.0) { return {OptimizerKind::adam, lr, wd}; }
};

/// Gradients keyed by parameter name; missing names are treated as zero.
using GradMap = std::map<std::string, std::vector<double>>;

/// Optimizer state: step count plus per-parameter moment buffers.
class Optimizer {
 public:
  explicit Optimizer(OptimizerSpec spec) : spec_(spec) {}

  const OptimizerSpec& spec() const { return spec_; }
  void set_lr(double lr) { spec_.lr = lr; }
  std::uint64_t steps() const { return steps_; }
  const std::vector<double>* first_moment(const std::string& name) const {
    auto it = m_.find(name);
    return it == m_.end() ? nullptr : &it->second;
  }

  /// Applies one update to every weight/affine entry with a gradient.
  /// Returns false (and changes nothing) if any gradient is non-finite or
  /// does not shape-match its parameter.
  [[nodiscard]] bool step(ParamSet& params, const GradMap& grads) {
    for (const auto& [name, g] : grads) {
      const NamedTensor* p = params.find(name);
      if (!p || p->value.size() != g.size()) return false;
      for (double v : g)
        if (!std::isfinite(v)) return false;
    }
    ++steps_;
    const double t = static_cast<double>(steps_);
    for (auto& e : params.entries()) {
      if (e.role == ParamRole::buffer) continue;
      auto it = grads.find(e.name);
      if (it == grads.end()) continue;
      const auto& g = it->second;
      auto& w = e.value.storage();
      switch (spec_.kind) {
        case OptimizerKind::plain_sgd:
          for (std::size_t i = 0; i < w.size(); ++i) w[i] -= spec_.lr * (g[i] + spec_.weight_decay * w[i]);
          break;
        case OptimizerKind::momentum_sgd: {
          auto& v = buffer(m_, e.name, w.size());
          for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g[i] + spec_.weight_decay * w[i];
            v[i] = spec_.momentum * v[i] + gi;
            w[i] -= spec_.lr * (spec_.nesterov ? gi + spec_.momentum * v[i] : v[i]);
          }
          break;
        }
        case OptimizerKind::adam: {
          auto& m = buffer(m_, e.name, w.size());
          auto& v = buffer(v_, e.name, w.size());
          const double c1 = 1.0 - std::pow(spec_.beta1, t);
          const double c2 = 1.0 - std::pow(spec_.beta2, t);
          for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g[i] + spec_.weight_decay * w[i];
            m[i] = spec_.beta1 * m[i] + (1.0 - spec_.beta1) * gi;
            v[i] = spec_.beta2 * v[i] + (1.0 - spec_.beta2) * gi * gi;
            w[i] -= spec_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + spec_.eps);
          }
          break;
        }
      }
    }
    return true;
  }

 private:
  static std::vector<double>& buffer(std::map<std::string, std::vector<double>>& store, const std::string& name,
                                     std::size_t n) {
    auto& b = store[name];
    if (b.size() != n) b.assign(n, 0.0);
    return b;
  }

  OptimizerSpec spec_;
  std::uint64_t steps_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

}  // namespace tdr
