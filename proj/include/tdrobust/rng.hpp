#pragma once

// Seeded randomness streams.
//
// Every consumer of randomness receives an Rng and derives named child
// streams from it. A child's seed is a pure function of the parent seed and
// the tag, so the k-th draw of any stream depends only on the root seed and
// the tag path that led to it, never on how many draws other streams made.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <string_view>
#include <vector>

namespace tdr {

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

constexpr std::uint64_t fnv1a(std::string_view s, std::uint64_t h = kFnvOffset) {
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a_bytes(const void* data, std::size_t n, std::uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a_u64(std::uint64_t v, std::uint64_t h = kFnvOffset) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xffU;
    h *= kFnvPrime;
  }
  return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  return splitmix64(seed ^ splitmix64(tag + 0x632be59bd9b4e019ULL));
}

/// Records which streams drew values and a digest of their first draws.
/// Shared by a root stream and everything derived from it.
class DrawTrace {
 public:
  static constexpr std::size_t kPrefix = 16;

  void record(std::uint64_t stream_seed, std::uint64_t value) {
    auto& e = streams_[stream_seed];
    if (e.prefix.size() < kPrefix) e.prefix.push_back(value);
    ++e.count;
    ++total_;
  }

  /// Digest over (stream seed, first draws) for every stream that drew.
  std::uint64_t digest() const {
    std::uint64_t h = kFnvOffset;
    for (const auto& [seed, e] : streams_) {
      h = fnv1a_u64(seed, h);
      for (auto v : e.prefix) h = fnv1a_u64(v, h);
    }
    return h;
  }

  /// True when every stream drawn in both traces produced the same values at
  /// every recorded draw point. Streams drawn in only one trace are ignored.
  bool consistent_with(const DrawTrace& other) const {
    for (const auto& [seed, e] : streams_) {
      const auto it = other.streams_.find(seed);
      if (it == other.streams_.end()) continue;
      const std::size_t n = std::min(e.prefix.size(), it->second.prefix.size());
      if (!std::equal(e.prefix.begin(), e.prefix.begin() + static_cast<std::ptrdiff_t>(n), it->second.prefix.begin()))
        return false;
    }
    return true;
  }

  /// Number of streams drawn in both traces.
  std::size_t shared_streams(const DrawTrace& other) const {
    std::size_t n = 0;
    for (const auto& kv : streams_) n += other.streams_.count(kv.first);
    return n;
  }

  std::uint64_t total_draws() const { return total_; }
  std::size_t stream_count() const { return streams_.size(); }

 private:
  struct Entry {
    std::uint64_t count = 0;
    std::vector<std::uint64_t> prefix;
  };
  std::map<std::uint64_t, Entry> streams_;
  std::uint64_t total_ = 0;
};

class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0, std::shared_ptr<DrawTrace> trace = nullptr)
      : seed_(seed), engine_(seed), trace_(std::move(trace)) {}

  static constexpr result_type min() { return std::numeric_limits<result_type>::min(); }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    const result_type v = engine_();
    if (trace_) trace_->record(seed_, v);
    return v;
  }

  Rng derive(std::string_view tag) const { return Rng(mix_seed(seed_, fnv1a(tag)), trace_); }
  Rng derive(std::uint64_t index) const { return Rng(mix_seed(seed_, splitmix64(index)), trace_); }
  Rng derive(std::string_view tag, std::uint64_t index) const { return derive(tag).derive(index); }

  std::uint64_t seed() const { return seed_; }
  const std::shared_ptr<DrawTrace>& trace() const { return trace_; }

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(*this); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(*this);
  }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(*this); }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::shared_ptr<DrawTrace> trace_;
};

}  // namespace tdr
