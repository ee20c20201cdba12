#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tdrobust/diffcore/tape.hpp"

namespace tdr {

/// A computation description: declared input shapes plus a body that records
/// the computation on a tape. A zero in a declared shape matches any extent.
struct Graph {
  using Body = std::function<Var(Tape&, std::span<const Var> inputs, std::span<const Var> params)>;

  std::string name;
  std::vector<Shape> input_shapes;
  Body body;
};

/// Result of forward_eval: owns the tape and the leaf handles.
class Evaluation {
 public:
  Evaluation() : tape_(std::make_unique<Tape>()) {}

  Tape& tape() { return *tape_; }
  const Tape& tape() const { return *tape_; }
  const Tensor& output() const { return tape_->value(root_); }
  Var root() const { return root_; }

  const std::vector<Var>& inputs() const { return inputs_; }
  const std::vector<Var>& params() const { return params_; }

  Tensor input_grad(std::size_t i) const { return tape_->grad_tensor(inputs_.at(i)); }
  Tensor param_grad(std::size_t i) const { return tape_->grad_tensor(params_.at(i)); }

 private:
  friend Evaluation forward_eval(const Graph&, std::span<const Tensor>, std::span<const Tensor>);

  std::unique_ptr<Tape> tape_;
  std::vector<Var> inputs_;
  std::vector<Var> params_;
  Var root_;
};

inline bool shape_matches(const Shape& declared, const Shape& actual) {
  if (declared.size() != actual.size()) return false;
  for (std::size_t i = 0; i < declared.size(); ++i)
    if (declared[i] != 0 && declared[i] != actual[i]) return false;
  return true;
}

/// Records `graph` on a fresh tape. Leaves take requires_grad from the tensors.
inline Evaluation forward_eval(const Graph& graph, std::span<const Tensor> inputs, std::span<const Tensor> params) {
  if (inputs.size() != graph.input_shapes.size())
    throw ShapeError("graph '" + graph.name + "' expects " + std::to_string(graph.input_shapes.size()) +
                     " inputs, got " + std::to_string(inputs.size()));
  Evaluation ev;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!shape_matches(graph.input_shapes[i], inputs[i].shape()))
      throw ShapeError("graph '" + graph.name + "' node input[" + std::to_string(i) + "]: expected " +
                       shape_str(graph.input_shapes[i]) + ", got " + shape_str(inputs[i].shape()));
    ev.inputs_.push_back(ev.tape().leaf(inputs[i], inputs[i].requires_grad(), "input[" + std::to_string(i) + "]"));
  }
  for (std::size_t i = 0; i < params.size(); ++i)
    ev.params_.push_back(ev.tape().leaf(params[i], params[i].requires_grad(), "param[" + std::to_string(i) + "]"));
  ev.root_ = graph.body(ev.tape(), ev.inputs_, ev.params_);
  if (!ev.output().all_finite()) throw TapeError("graph '" + graph.name + "' produced non-finite output");
  return ev;
}

/// Populates gradients of every requires_grad leaf. Root must be scalar.
inline void backward_grad(Evaluation& ev) { ev.tape().backward(ev.root()); }

struct LeafCheck {
  std::string leaf;
  double max_rel_error = 0.0;
  bool nonfinite = false;
  bool flagged = false;
};

struct GradCheckReport {
  std::vector<LeafCheck> leaves;
  bool ok() const {
    for (const auto& l : leaves)
      if (l.flagged) return false;
    return true;
  }
  double worst() const {
    double w = 0.0;
    for (const auto& l : leaves) w = std::max(w, l.max_rel_error);
    return w;
  }
};

/// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps entries whose
/// true derivative is ~0 from dominating through rounding noise.
inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares backward_grad against central finite differences for every leaf
/// (inputs and params) that requires a gradient.
inline GradCheckReport grad_check(const Graph& graph, std::span<const Tensor> params, std::span<const Tensor> inputs,
                                  double h, double tol, double floor = 1e-3) {
  if (!(h > 0.0) || !(tol > 0.0)) throw std::invalid_argument("grad_check needs h > 0 and tol > 0");
  Evaluation ev = forward_eval(graph, inputs, params);
  if (ev.output().size() != 1) throw TapeError("grad_check: graph '" + graph.name + "' output is not scalar");
  backward_grad(ev);

  std::vector<Tensor> in(inputs.begin(), inputs.end());
  std::vector<Tensor> pr(params.begin(), params.end());
  auto eval_at = [&]() {
    Evaluation e = forward_eval(graph, in, pr);
    return e.output()[0];
  };

  GradCheckReport report;
  auto check_group = [&](std::vector<Tensor>& group, const std::vector<Var>& vars, const char* prefix) {
    for (std::size_t li = 0; li < group.size(); ++li) {
      if (!group[li].requires_grad()) continue;
      LeafCheck lc;
      lc.leaf = std::string(prefix) + "[" + std::to_string(li) + "]";
      const auto& analytic = ev.tape().grad(vars[li]);
      for (std::size_t k = 0; k < group[li].size(); ++k) {
        const double orig = group[li][k];
        group[li][k] = orig + h;
        double fp = 0.0, fm = 0.0;
        bool finite = true;
        try {
          fp = eval_at();
          group[li][k] = orig - h;
          fm = eval_at();
        } catch (const TapeError&) {
          finite = false;
        }
        group[li][k] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        if (!finite || !std::isfinite(numeric)) {
          lc.nonfinite = true;
          continue;
        }
        lc.max_rel_error = std::max(lc.max_rel_error, relative_error(analytic[k], numeric, floor));
      }
      lc.flagged = lc.nonfinite || lc.max_rel_error >= tol;
      report.leaves.push_back(lc);
    }
  };
  check_group(in, ev.inputs(), "input");
  check_group(pr, ev.params(), "param");
  return report;
}

}  // namespace tdr
