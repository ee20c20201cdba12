#pragma once

// Reverse-mode differentiation over dense tensors.
//
// A Tape records primitive operations in creation order. Since every node is
// appended after its parents, walking the node list backwards from the root is
// a reverse topological order and visits each operation once.
// Tapes are single-use: backward() may run once.

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tdrobust/diffcore/tensor.hpp"

namespace tdr {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  bool valid() const { return tape != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  Var leaf(Tensor value, bool requires_grad, std::string name = "leaf") {
    if (!value.all_finite()) throw TapeError("leaf '" + name + "' holds non-finite values");
    nodes_.push_back(Node{std::move(value), {}, requires_grad, true, std::move(name), {}});
    return Var{this, nodes_.size() - 1};
  }
  Var constant(Tensor value, std::string name = "const") { return leaf(std::move(value), false, std::move(name)); }

  /// Appends an operation node. `fn` is dropped when no parent needs gradients.
  Var record(std::string op, Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
    bool rg = false;
    for (const Var& p : parents) {
      check_owner(p, op);
      rg = rg || nodes_[p.id].requires_grad;
    }
    if (consumed_) throw TapeError("cannot record '" + op + "' on a consumed tape");
    nodes_.push_back(Node{std::move(value), {}, rg, false, std::move(op), rg ? std::move(fn) : BackwardFn{}});
    return Var{this, nodes_.size() - 1};
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::string& op_name(Var v) const { return nodes_.at(v.id).op; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  std::size_t last_backward_visits() const { return visits_; }

  /// Label used in diagnostics: "op#id".
  std::string label(std::size_t id) const { return nodes_[id].op + "#" + std::to_string(id); }

  /// Gradient buffer of a node, zero-initialised on first access.
  std::vector<double>& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }
  const std::vector<double>& upstream(std::size_t id) const { return nodes_[id].grad; }

  void backward(Var root) {
    check_owner(root, "backward");
    if (consumed_) throw TapeError("backward called twice on a consumed tape");
    const Node& r = nodes_[root.id];
    if (r.value.size() != 1)
      throw TapeError("backward root " + label(root.id) + " is not scalar: shape " + shape_str(r.value.shape()));
    consumed_ = true;
    visits_ = 0;
    grad_buffer(root.id)[0] = 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.is_leaf || !n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
      ++visits_;
    }
    for (Node& n : nodes_) {
      if (n.is_leaf) {
        if (n.requires_grad && n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
      } else {
        std::vector<double>().swap(n.grad);
        n.backward = nullptr;
      }
    }
  }

  /// d(root)/d(leaf); only valid after backward().
  const std::vector<double>& grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (!consumed_) throw TapeError("gradient requested before backward");
    if (!n.is_leaf || !n.requires_grad) throw TapeError("no gradient kept for " + label(v.id));
    return n.grad;
  }
  Tensor grad_tensor(Var v) const { return Tensor(nodes_.at(v.id).value.shape(), grad(v)); }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    bool requires_grad;
    bool is_leaf;
    std::string op;
    BackwardFn backward;
  };

  void check_owner(const Var& v, const std::string& op) const {
    if (v.tape != this || v.id >= nodes_.size()) throw TapeError("operand of '" + op + "' belongs to another tape");
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
  std::size_t visits_ = 0;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

namespace ops {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

namespace detail {

inline void same_shape(const Var& a, const Var& b, const std::string& op) {
  if (a.shape() != b.shape())
    throw ShapeError(op + "#" + std::to_string(a.tape->size()) + ": operand shapes differ " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

inline void need_rank2(const Var& a, const std::string& op) {
  if (a.shape().size() != 2)
    throw ShapeError(op + "#" + std::to_string(a.tape->size()) + ": expected a matrix, got " + shape_str(a.shape()));
}

template <class F>
Tensor map_values(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <class G>
void accumulate(Tape& t, Var p, std::size_t n, G&& g) {
  if (!t.requires_grad(p)) return;
  auto& buf = t.grad_buffer(p.id);
  for (std::size_t i = 0; i < n; ++i) buf[i] += g(i);
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::need_rank2(a, "matmul");
  detail::need_rank2(b, "matmul");
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  if (b.shape()[0] != k)
    throw ShapeError("matmul#" + std::to_string(a.tape->size()) + ": inner dimensions differ " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  Tensor out({n, m});
  Map(out.data(), n, m).noalias() = MapC(a.value().data(), n, k) * MapC(b.value().data(), k, m);
  return a.tape->record("matmul", std::move(out), {a, b}, [a, b, n, k, m](Tape& t, std::size_t self) {
    MapC g(t.upstream(self).data(), n, m);
    if (t.requires_grad(a)) Map(t.grad_buffer(a.id).data(), n, k).noalias() += g * MapC(t.value(b).data(), k, m).transpose();
    if (t.requires_grad(b)) Map(t.grad_buffer(b.id).data(), k, m).noalias() += MapC(t.value(a).data(), n, k).transpose() * g;
  });
}

inline Var add(Var a, Var b) {
  detail::same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  const std::size_t n = out.size();
  return a.tape->record("add", std::move(out), {a, b}, [a, b, n](Tape& t, std::size_t self) {
    const auto& g = t.upstream(self);
    detail::accumulate(t, a, n, [&](std::size_t i) { return g[i]; });
    detail::accumulate(t, b, n, [&](std::size_t i) { return g[i]; });
  });
}

inline Var sub(Var a, Var b) {
  detail::same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  const std::size_t n = out.size();
  return a.tape->record("sub", std::move(out), {a, b}, [a, b, n](Tape& t, std::size_t self) {
    const auto& g = t.upstream(self);
    detail::accumulate(t, a, n, [&](std::size_t i) { return g[i]; });
    detail::accumulate(t, b, n, [&](std::size_t i) { return -g[i]; });
  });
}

inline Var mul(Var a, Var b) {
  detail::same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  const std::size_t n = out.size();
  return a.tape->record("mul", std::move(out), {a, b}, [a, b, n](Tape& t, std::size_t self) {
    const auto& g = t.upstream(self);
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    detail::accumulate(t, a, n, [&](std::size_t i) { return g[i] * bv[i]; });
    detail::accumulate(t, b, n, [&](std::size_t i) { return g[i] * av[i]; });
  });
}

/// a[n,m] + r[m] broadcast over rows.
inline Var add_row(Var a, Var r) {
  detail::need_rank2(a, "add_row");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  if (r.value().size() != m)
    throw ShapeError("add_row#" + std::to_string(a.tape->size()) + ": row vector " + shape_str(r.shape()) +
                     " does not match " + shape_str(a.shape()));
  Tensor out(a.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = a.value()[i * m + j] + r.value()[j];
  return a.tape->record("add_row", std::move(out), {a, r}, [a, r, n, m](Tape& t, std::size_t self) {
    const auto& g = t.upstream(self);
    detail::accumulate(t, a, n * m, [&](std::size_t i) { return g[i]; });
    if (t.requires_grad(r)) {
      auto& gr = t.grad_buffer(r.id);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gr[j] += g[i * m + j];
    }
  });
}

/// a[n,m] * r[m] broadcast over rows.
inline Var mul_row(Var a, Var r) {
  detail::need_rank2(a, "mul_row");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  if (r.value().size() != m)
    throw ShapeError("mul_row#" + std::to_string(a.tape->size()) + ": row vector " + shape_str(r.shape()) +
                     " does not match " + shape_str(a.shape()));
  Tensor out(a.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = a.value()[i * m + j] * r.value()[j];
  return a.tape->record("mul_row", std::move(out), {a, r}, [a, r, n, m](Tape& t, std::size_t self) {
    const auto& g = t.upstream(self);
    const Tensor& av = t.value(a);
    const Tensor& rv = t.value(r);
    detail::accumulate(t, a, n * m, [&](std::size_t i) { return g[i] * rv[i % m]; });
    if (t.requires_grad(r)) {
      auto& gr = t.grad_buffer(r.id);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gr[j] += g[i * m + j] * av[i * m + j];
    }
  });
}

inline Var scale(Var a, double c) {
  Tensor out = detail::map_values(a.value(), [c](double v) { return c * v; });
  const std::size_t n = out.size();
  return a.tape->record("scale", std::move(out), {a}, [a, c, n](Tape& t, std::size_t self) {
    const auto& g = t.upstream(self);
    detail::accumulate(t, a, n, [&](std::size_t i) { return c * g[i]; });
  });
}

inline Var neg(Var a) { return scale(a, -1.0); }

inline Var add_scalar(Var a, double c) {
  Tensor out = detail::map_values(a.value(), [c](double v) { return v + c; });
  const std::size_t n = out.size();
  return a.tape->record("add_scalar", std::move(out), {a}, [a, n](Tape& t, std::size_t self) {
    const auto& g = t.upstream(self);
    detail::accumulate(t, a, n, [&](std::size_t i) { return g[i]; });
  });
}

/// max(x, 0); the subgradient at 0 is taken as 0.
inline Var relu(Var a) {
  Tensor out = detail::map_values(a.value(), [](double v) { return v > 0.0 ? v : 0.0; });
  const std::size_t n = out.size();
  return a.tape->record("relu", std::move(out), {a}, [a, n](Tape& t, std::size_t self) {
    const auto& g = t.upstream(self);
    const Tensor& av = t.value(a);
    detail::accumulate(t, a, n, [&](std::size_t i) { return av[i] > 0.0 ? g[i] : 0.0; });
  });
}

inline Var exp(Var a) {
  Tensor out = detail::map_values(a.value(), [](double v) { return std::exp(v); });
  const std::size_t n = out.size();
  return a.tape->record("exp", std::move(out), {a}, [a, n](Tape& t, std::size_t self) {
    const auto& g = t.upstream(self);
    const Tensor& y = t.value(Var{&t, self});
    detail::accumulate(t, a, n, [&](std::size_t i) { return g[i] * y[i]; });
  });
}

inline Var log(Var a) {
  Tensor out = detail::map_values(a.value(), [](double v) { return std::log(v); });
  const std::size_t n = out.size();
  return a.tape->record("log", std::move(out), {a}, [a, n](Tape& t, std::size_t self) {
    const auto& g = t.upstream(self);
    const Tensor& av = t.value(a);
    detail::accumulate(t, a, n, [&](std::size_t i) { return g[i] / av[i]; });
  });
}

/// Elementwise v^p.
inline Var pow(Var a, double p) {
  Tensor out = detail::map_values(a.value(), [p](double v) { return std::pow(v, p); });
  const std::size_t n = out.size();
  return a.tape->record("pow", std::move(out), {a}, [a, p, n](Tape& t, std::size_t self) {
    const auto& g = t.upstream(self);
    const Tensor& av = t.value(a);
    detail::accumulate(t, a, n, [&](std::size_t i) { return g[i] * p * std::pow(av[i], p - 1.0); });
  });
}

/// v log v with 0 log 0 = 0 (gradient 0 there).
inline Var xlogx(Var a) {
  Tensor out = detail::map_values(a.value(), [](double v) { return v > 0.0 ? v * std::log(v) : 0.0; });
  const std::size_t n = out.size();
  return a.tape->record("xlogx", std::move(out), {a}, [a, n](Tape& t, std::size_t self) {
    const auto& g = t.upstream(self);
    const Tensor& av = t.value(a);
    detail::accumulate(t, a, n, [&](std::size_t i) { return av[i] > 0.0 ? g[i] * (std::log(av[i]) + 1.0) : 0.0; });
  });
}

inline Var square(Var a) {
  Tensor out = detail::map_values(a.value(), [](double v) { return v * v; });
  const std::size_t n = out.size();
  return a.tape->record("square", std::move(out), {a}, [a, n](Tape& t, std::size_t self) {
    const auto& g = t.upstream(self);
    const Tensor& av = t.value(a);
    detail::accumulate(t, a, n, [&](std::size_t i) { return 2.0 * av[i] * g[i]; });
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t n = a.value().size();
  return a.tape->record("sum", Tensor::scalar(s), {a}, [a, n](Tape& t, std::size_t self) {
    const double g = t.upstream(self)[0];
    detail::accumulate(t, a, n, [g](std::size_t) { return g; });
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Column sums of a[n,m] -> [m].
inline Var sum_rows(Var a) {
  detail::need_rank2(a, "sum_rows");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  Tensor out({m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j] += a.value()[i * m + j];
  return a.tape->record("sum_rows", std::move(out), {a}, [a, n, m](Tape& t, std::size_t self) {
    const auto& g = t.upstream(self);
    detail::accumulate(t, a, n * m, [&](std::size_t i) { return g[i % m]; });
  });
}

/// Row sums of a[n,m] -> [n].
inline Var sum_cols(Var a) {
  detail::need_rank2(a, "sum_cols");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i] += a.value()[i * m + j];
  return a.tape->record("sum_cols", std::move(out), {a}, [a, n, m](Tape& t, std::size_t self) {
    const auto& g = t.upstream(self);
    detail::accumulate(t, a, n * m, [&](std::size_t i) { return g[i / m]; });
  });
}

inline Var log_softmax(Var a) {
  detail::need_rank2(a, "log_softmax");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  Tensor out(a.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = a.value().data() + i * m;
    const double mx = *std::max_element(z, z + m);
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += std::exp(z[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = z[j] - lse;
  }
  return a.tape->record("log_softmax", std::move(out), {a}, [a, n, m](Tape& t, std::size_t self) {
    if (!t.requires_grad(a)) return;
    const auto& g = t.upstream(self);
    const Tensor& y = t.value(Var{&t, self});
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < n; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < m; ++j) gs += g[i * m + j];
      for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += g[i * m + j] - std::exp(y[i * m + j]) * gs;
    }
  });
}

inline Var softmax(Var a) {
  detail::need_rank2(a, "softmax");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  Tensor out(a.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = a.value().data() + i * m;
    const double mx = *std::max_element(z, z + m);
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += (out[i * m + j] = std::exp(z[j] - mx));
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= s;
  }
  return a.tape->record("softmax", std::move(out), {a}, [a, n, m](Tape& t, std::size_t self) {
    if (!t.requires_grad(a)) return;
    const auto& g = t.upstream(self);
    const Tensor& y = t.value(Var{&t, self});
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += g[i * m + j] * y[i * m + j];
      for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += y[i * m + j] * (g[i * m + j] - dot);
    }
  });
}

/// out[i] = a[i, idx[i]]; rows with idx < 0 yield 0 and pass no gradient.
inline Var pick(Var a, std::span<const int> idx) {
  detail::need_rank2(a, "pick");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  if (idx.size() != n)
    throw ShapeError("pick#" + std::to_string(a.tape->size()) + ": " + std::to_string(idx.size()) +
                     " indices for " + std::to_string(n) + " rows");
  std::vector<int> ix(idx.begin(), idx.end());
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    if (ix[i] >= static_cast<int>(m)) throw ShapeError("pick: index out of range");
    out[i] = ix[i] < 0 ? 0.0 : a.value()[i * m + static_cast<std::size_t>(ix[i])];
  }
  return a.tape->record("pick", std::move(out), {a}, [a, ix = std::move(ix), n, m](Tape& t, std::size_t self) {
    if (!t.requires_grad(a)) return;
    const auto& g = t.upstream(self);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < n; ++i)
      if (ix[i] >= 0) ga[i * m + static_cast<std::size_t>(ix[i])] += g[i];
  });
}

/// out[i] = max_{k != exclude[i]} a[i,k]. Gradient flows to the first maximiser.
inline Var max_excluding(Var a, std::span<const int> exclude) {
  detail::need_rank2(a, "max_excluding");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  if (exclude.size() != n) throw ShapeError("max_excluding: index count does not match rows");
  if (m < 2) throw ShapeError("max_excluding needs at least two columns");
  std::vector<std::size_t> arg(n);
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    std::size_t bj = 0;
    for (std::size_t j = 0; j < m; ++j) {
      if (static_cast<int>(j) == exclude[i]) continue;
      const double v = a.value()[i * m + j];
      if (v > best) {
        best = v;
        bj = j;
      }
    }
    arg[i] = bj;
    out[i] = best;
  }
  return a.tape->record("max_excluding", std::move(out), {a}, [a, arg = std::move(arg), n, m](Tape& t, std::size_t self) {
    if (!t.requires_grad(a)) return;
    const auto& g = t.upstream(self);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < n; ++i) ga[i * m + arg[i]] += g[i];
  });
}

/// Identity forward; multiplies the incoming gradient by -alpha.
inline Var grad_reverse(Var a, double alpha) {
  Tensor out = a.value();
  out.set_requires_grad(false);
  const std::size_t n = out.size();
  return a.tape->record("grad_reverse", std::move(out), {a}, [a, alpha, n](Tape& t, std::size_t self) {
    const auto& g = t.upstream(self);
    detail::accumulate(t, a, n, [&](std::size_t i) { return -alpha * g[i]; });
  });
}

/// Geometry of a valid, stride-1 2-D correlation.
struct Conv2dGeometry {
  std::size_t in_channels = 1, height = 1, width = 1;
  std::size_t out_channels = 1, kernel = 1;

  std::size_t out_h() const { return height - kernel + 1; }
  std::size_t out_w() const { return width - kernel + 1; }
  std::size_t in_size() const { return in_channels * height * width; }
  std::size_t out_size() const { return out_channels * out_h() * out_w(); }
  std::size_t patch() const { return in_channels * kernel * kernel; }
};

/// x[n, cin*h*w] correlated with w[cout, cin*k*k] plus b[cout] -> [n, cout*oh*ow].
inline Var conv2d(Var x, Var w, Var b, const Conv2dGeometry& geo) {
  detail::need_rank2(x, "conv2d");
  const std::size_t n = x.shape()[0];
  if (geo.kernel > geo.height || geo.kernel > geo.width) throw ShapeError("conv2d: kernel larger than input");
  if (x.shape()[1] != geo.in_size()) throw ShapeError("conv2d: input " + shape_str(x.shape()) + " does not match geometry");
  if (w.value().size() != geo.out_channels * geo.patch()) throw ShapeError("conv2d: kernel tensor size mismatch");
  if (b.value().size() != geo.out_channels) throw ShapeError("conv2d: bias size mismatch");
  const std::size_t oh = geo.out_h(), ow = geo.out_w(), P = geo.patch(), L = oh * ow, K = geo.kernel;
  // im2col per sample: cols[P, L]
  auto im2col = [geo, oh, ow, P, L, K](const double* img, RowMat& cols) {
    cols.resize(static_cast<Eigen::Index>(P), static_cast<Eigen::Index>(L));
    for (std::size_t c = 0; c < geo.in_channels; ++c)
      for (std::size_t ki = 0; ki < K; ++ki)
        for (std::size_t kj = 0; kj < K; ++kj) {
          const std::size_t p = (c * K + ki) * K + kj;
          for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j)
              cols(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i * ow + j)) =
                  img[(c * geo.height + i + ki) * geo.width + j + kj];
        }
  };
  Tensor out({n, geo.out_size()});
  MapC W(w.value().data(), geo.out_channels, P);
  RowMat cols;
  for (std::size_t s = 0; s < n; ++s) {
    im2col(x.value().data() + s * geo.in_size(), cols);
    Map o(out.data() + s * geo.out_size(), geo.out_channels, L);
    o.noalias() = W * cols;
    for (std::size_t c = 0; c < geo.out_channels; ++c) o.row(static_cast<Eigen::Index>(c)).array() += b.value()[c];
  }
  return x.tape->record("conv2d", std::move(out), {x, w, b}, [x, w, b, geo, n, P, L, K, oh, ow, im2col](Tape& t, std::size_t self) {
    const auto& g = t.upstream(self);
    MapC W(t.value(w).data(), geo.out_channels, P);
    RowMat cols;
    for (std::size_t s = 0; s < n; ++s) {
      MapC gs(g.data() + s * geo.out_size(), geo.out_channels, L);
      if (t.requires_grad(w)) {
        im2col(t.value(x).data() + s * geo.in_size(), cols);
        Map(t.grad_buffer(w.id).data(), geo.out_channels, P).noalias() += gs * cols.transpose();
      }
      if (t.requires_grad(b)) {
        auto& gb = t.grad_buffer(b.id);
        for (std::size_t c = 0; c < geo.out_channels; ++c) gb[c] += gs.row(static_cast<Eigen::Index>(c)).sum();
      }
      if (t.requires_grad(x)) {
        RowMat gcols = W.transpose() * gs;  // [P, L]
        double* gx = t.grad_buffer(x.id).data() + s * geo.in_size();
        for (std::size_t c = 0; c < geo.in_channels; ++c)
          for (std::size_t ki = 0; ki < K; ++ki)
            for (std::size_t kj = 0; kj < K; ++kj) {
              const std::size_t p = (c * K + ki) * K + kj;
              for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j)
                  gx[(c * geo.height + i + ki) * geo.width + j + kj] +=
                      gcols(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i * ow + j));
            }
      }
    }
  });
}

}  // namespace ops
}  // namespace tdr
