#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace capsbench {

// SplitMix64 generator. Chosen over <random> engines because every draw is
// fully specified here, so seeded results are identical across platforms and
// standard-library versions. Streams are cheap value types; derive one per
// (seed, purpose, index) so data-loading order or threading cannot change
// what any sample sees.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  // Independent stream keyed by up to three values (seed, salt, index).
  static Rng stream(uint64_t seed, uint64_t salt, uint64_t index = 0) {
    uint64_t s = mix(seed + 0x9e3779b97f4a7c15ULL * (salt + 1));
    s = mix(s ^ mix(index + 0xbf58476d1ce4e5b9ULL));
    return Rng(s);
  }

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix(state_);
  }

  // [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  float next_float() { return static_cast<float>(next_double()); }

  // Unbiased integer in [0, n) via rejection.
  uint64_t uniform_below(uint64_t n) {
    if (n <= 1) return 0;
    const uint64_t threshold = (0ULL - n) % n;  // 2^64 mod n
    for (;;) {
      const uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Standard normal via Box-Muller. Pairs are drawn fresh each call; the
  // spare is discarded to keep the stream state a single 64-bit word.
  double normal() {
    double u1 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  uint64_t state_;
};

}  // namespace capsbench
