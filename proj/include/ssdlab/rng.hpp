#pragma once

#include <cstdint>
#include <random>

namespace ssdlab::rng {

/// splitmix64 finalizer; used for deriving child seeds from a root seed.
inline std::uint64_t splitmix64(std::uint64_t state) {
  std::uint64_t z = state + 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/**
 * Seed-splitting rule used everywhere streams are derived:
 *
 *   child(root, index) = splitmix64(root + (index + 1) * 0x9E3779B97F4A7C15)
 *
 * Adding replications or entries never perturbs the streams of earlier
 * indices, and distinct indices give statistically independent streams.
 */
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) {
  return splitmix64(root + (index + 1) * 0x9E3779B97F4A7C15ull);
}

/**
 * Seeded random stream. Wraps mt19937_64; uniform doubles are produced
 * from the top 53 bits so draws consume exactly one engine step.
 */
class Stream {
 public:
  explicit Stream(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1), 53-bit resolution.
  double next_uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  /// Underlying engine, for stdlib distributions (gamma draws etc).
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace ssdlab::rng
