#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <string_view>

namespace mixdistill {

/// Stable seed derivation: splitmix64(base ^ fnv1a64(tag)). The scheme is part
/// of the run-manifest contract and must not change between versions.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag);
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

/// Deterministic random stream. Uniform draws are built directly from the
/// 53 high bits of the engine so they are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() { return normal_(engine_); }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * n) % n; }
  std::uint64_t next_u64() { return engine_(); }

  /// Fisher-Yates over [first, last) using index(); portable across libraries.
  template <class It>
  void shuffle(It first, It last) {
    for (auto n = last - first; n > 1; --n) {
      std::swap(first[n - 1], first[static_cast<decltype(n)>(index(static_cast<std::size_t>(n)))]);
    }
  }

  /// Independent child stream keyed by tag; does not advance this stream.
  Rng split(std::string_view tag) const { return Rng(derive_seed(seed_hint(), tag)); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_hint() const {
    std::mt19937_64 copy = engine_;
    return copy();
  }

  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace mixdistill
