#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace deidforge {

/// SplitMix64: 64-bit state, fixed output sequence on every platform.
///
/// Standard-library distributions are implementation-defined, so all
/// sampling in the project goes through the helpers below. Independent
/// streams are derived with `derive`, which hashes a seed together with a
/// list of integer coordinates (iteration, sample index, ...).
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t state() const { return state_; }

  /// Uniform double in [0, 1) built from the top 53 bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Uses rejection to avoid modulo bias.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t r = next();
    while (r >= limit) r = next();
    return r % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  static SplitMix64 derive(std::uint64_t seed, std::initializer_list<std::uint64_t> coords) {
    SplitMix64 mixer(seed);
    std::uint64_t h = mixer.next();
    for (std::uint64_t c : coords) {
      SplitMix64 step(h ^ (c + 0x632be59bd9b4e019ULL));
      h = step.next();
    }
    return SplitMix64(h);
  }

 private:
  std::uint64_t state_;
};

}  // namespace deidforge
