#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tdrobust/rng.hpp"

namespace tdr {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major float64 array.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)), values_(shape_size(shape_), fill) {
    check_dims();
  }

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    check_dims();
    if (shape_size(shape_) != values_.size())
      throw ShapeError("tensor of shape " + shape_str(shape_) + " given " + std::to_string(values_.size()) +
                       " values");
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  /// Leading dimension (batch rows).
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  /// Product of all trailing dimensions.
  std::size_t cols() const { return shape_.empty() ? 0 : values_.size() / std::max<std::size_t>(shape_[0], 1); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::vector<double>& storage() { return values_; }
  const std::vector<double>& storage() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {values_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols(), cols()}; }

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool on) {
    requires_grad_ = on;
    if (!on) grad_.reset();
    return *this;
  }
  const std::optional<std::vector<double>>& grad() const { return grad_; }
  void set_grad(std::vector<double> g) {
    if (g.size() != values_.size()) throw ShapeError("gradient size does not match tensor " + shape_str(shape_));
    grad_ = std::move(g);
  }
  void clear_grad() { grad_.reset(); }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  Tensor reshaped(Shape s) const {
    if (shape_size(s) != values_.size()) throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), values_);
  }

  /// Rows [begin, end) of a rank>=1 tensor.
  Tensor slice_rows(std::size_t begin, std::size_t end) const {
    const std::size_t c = cols();
    Shape s = shape_;
    s[0] = end - begin;
    return Tensor(std::move(s), std::vector<double>(values_.begin() + begin * c, values_.begin() + end * c));
  }

  Tensor gather_rows(std::span<const std::size_t> idx) const {
    const std::size_t c = cols();
    Shape s = shape_;
    s[0] = idx.size();
    std::vector<double> out;
    out.reserve(idx.size() * c);
    for (std::size_t i : idx) out.insert(out.end(), values_.begin() + i * c, values_.begin() + (i + 1) * c);
    return Tensor(std::move(s), std::move(out));
  }

  std::uint64_t digest() const { return fnv1a_bytes(values_.data(), values_.size() * sizeof(double)); }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.values_ == b.values_; }

 private:
  void check_dims() const {
    for (std::size_t d : shape_)
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<double> values_;
  bool requires_grad_ = false;
  std::optional<std::vector<double>> grad_;
};

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw ShapeError("concat_rows: column mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Shape s = a.shape();
  s[0] += b.rows();
  std::vector<double> v(a.storage());
  v.insert(v.end(), b.storage().begin(), b.storage().end());
  return Tensor(std::move(s), std::move(v));
}

}  // namespace tdr
