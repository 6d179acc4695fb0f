#pragma once

#include <cstdint>

namespace memfold {

// Deterministic 64-bit generator (SplitMix64, published constants).
// Every reproducible stream in the toolkit goes through this so that
// identical seeds give identical traces on any platform.
class SplitMix64 {
public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0,1).
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform in [0,n); returns 0 for n == 0.
  std::uint64_t next_below(std::uint64_t n) {
    return n ? next_u64() % n : 0;
  }

private:
  std::uint64_t state_;
};

}  // namespace memfold
