#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace malvis {

/// SplitMix64 finalizer; used to derive independent stream seeds.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// FNV-1a over a string, for deriving per-sample streams from ids.
std::uint64_t hash_string(std::string_view s) noexcept;

/// Seed for a stream keyed by (seed, key). Independent of call order.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view key) noexcept;

// Deterministic PRNG (xoshiro256**) with portable distribution helpers.
// std:: distributions are implementation-defined, so none are used anywhere
// results must be reproducible.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) noexcept;

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 bits.
  double uniform() noexcept;
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) noexcept;
  /// Uniform integer in [lo, hi] inclusive.
  std::int64_t range(std::int64_t lo, std::int64_t hi) noexcept;
  bool bernoulli(double p) noexcept { return uniform() < p; }
  /// Standard normal via Box-Muller (no cached spare, so state is simple).
  double normal() noexcept;

  template <typename T>
  void shuffle(std::vector<T>& v) noexcept {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t s_[4];
};

}  // namespace malvis
