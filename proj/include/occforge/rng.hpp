#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace occ {

/// FNV-1a, stable across platforms.
std::uint64_t stable_hash(std::string_view text);

std::uint64_t splitmix64(std::uint64_t x);

/// Seeded generator with platform-independent derived distributions
/// (std::uniform_real_distribution output is implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [lo, hi].
  std::int64_t integer(std::int64_t lo, std::int64_t hi);
  bool bernoulli(double p) { return uniform() < p; }
  double normal();

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace occ
