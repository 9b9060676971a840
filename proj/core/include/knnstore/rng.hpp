#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace knnstore {

// Deterministic distribution transforms over std::mt19937_64.
//
// The standard <random> distributions are implementation-defined, so seeded
// artifacts would not be byte-stable across standard libraries. Everything
// here is pinned to the mt19937_64 output sequence, which the standard does
// guarantee.

// Uniform double in [0, 1) with 53 random bits.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Uniform double in [lo, hi).
inline double uniform_range(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

// Uniform integer in [0, n). n must be positive. The modulo bias is
// O(n / 2^64) and irrelevant at the scales used here.
inline std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t n) {
  return rng() % n;
}

// Standard normal via Box-Muller, one value per call (the spare is cached).
class NormalSampler {
 public:
  double operator()(std::mt19937_64& rng) {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    // u1 must be strictly positive for the log.
    do {
      u1 = uniform01(rng);
    } while (u1 <= 0.0);
    const double u2 = uniform01(rng);
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 6.283185307179586476925286766559 * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

 private:
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// In-place Fisher-Yates shuffle driven by bounded() above.
template <typename T>
void deterministic_shuffle(std::vector<T>& items, std::mt19937_64& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(bounded(rng, i));
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace knnstore
