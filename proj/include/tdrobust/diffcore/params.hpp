#pragma once

#include <bit>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tdrobust/diffcore/tensor.hpp"

namespace tdr {

/// What a named tensor is for. Buffers are never touched by optimizers.
enum class ParamRole { weight, affine, buffer };

struct NamedTensor {
  std::string name;
  Tensor value;
  ParamRole role = ParamRole::weight;
};

/// Ordered collection of named parameters.
class ParamSet {
 public:
  ParamSet() = default;

  Tensor& add(std::string name, Tensor value, ParamRole role = ParamRole::weight) {
    if (find(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    entries_.push_back({std::move(name), std::move(value), role});
    return entries_.back().value;
  }

  const NamedTensor* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }
  NamedTensor* find(const std::string& name) {
    for (auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }
  Tensor& at(const std::string& name) {
    if (auto* e = find(name)) return e->value;
    throw std::out_of_range("no parameter '" + name + "'");
  }
  const Tensor& at(const std::string& name) const {
    if (const auto* e = find(name)) return e->value;
    throw std::out_of_range("no parameter '" + name + "'");
  }

  std::size_t size() const { return entries_.size(); }
  std::vector<NamedTensor>& entries() { return entries_; }
  const std::vector<NamedTensor>& entries() const { return entries_; }
  NamedTensor& operator[](std::size_t i) { return entries_[i]; }
  const NamedTensor& operator[](std::size_t i) const { return entries_[i]; }

  /// 64-bit FNV-1a over the little-endian float64 stream of every tensor in order.
  std::uint64_t fingerprint() const {
    std::uint64_t h = kFnvOffset;
    for (const auto& e : entries_) h = fnv1a_bytes(e.value.data(), e.value.size() * sizeof(double), h);
    return h;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i)
      if (a.entries_[i].name != b.entries_[i].name || !(a.entries_[i].value == b.entries_[i].value)) return false;
    return true;
  }

 private:
  std::vector<NamedTensor> entries_;
};

static_assert(std::endian::native == std::endian::little, "checkpoint streams assume a little-endian host");

}  // namespace tdr
