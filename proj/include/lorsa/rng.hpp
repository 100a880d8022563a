#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace lorsa {

// Seeded random stream with hand-rolled distributions. std::mt19937_64 raw
// output is pinned by the standard; the distribution adapters in <random>
// are not, so we map bits to doubles ourselves to keep draw sequences
// bit-identical across platforms and builds.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), eng_(seed) {}

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() { return eng_(); }

  // [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; the spare value is cached, so draws stay sequential.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, n), rejection sampled to avoid modulo bias.
  uint64_t randint(uint64_t n) {
    if (n == 0) return 0;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  int64_t randint(int64_t lo, int64_t hi_exclusive) {
    return lo + static_cast<int64_t>(randint(static_cast<uint64_t>(hi_exclusive - lo)));
  }

  // Independent child stream; used to give workers/sequences their own
  // deterministic streams regardless of scheduling.
  Rng fork(uint64_t stream) const { return Rng(mix(seed_, stream)); }

  static uint64_t mix(uint64_t a, uint64_t b) {
    // splitmix64 finalizer over the combined state
    uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  uint64_t seed_;
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace lorsa
