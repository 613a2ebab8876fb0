#pragma once

#include <cmath>
#include <cstdint>

namespace dspo {

/// Counter-based random numbers: every draw is a pure function of
/// (seed, stream, a, b), so results do not depend on evaluation order.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

  std::uint64_t bits(std::uint64_t a, std::uint64_t b = 0) const {
    std::uint64_t x = mix(seed_ ^ mix(stream_ + 0x632be59bd9b4e019ULL));
    x = mix(x ^ (a * 0x9e3779b97f4a7c15ULL));
    x = mix(x ^ (b * 0xc2b2ae3d27d4eb4fULL + 0x165667b19e3779f9ULL));
    return x;
  }

  /// Uniform in [0, 1).
  double uniform(std::uint64_t a, std::uint64_t b = 0) const {
    return static_cast<double>(bits(a, b) >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller on two decorrelated counters.
  double normal(std::uint64_t a, std::uint64_t b = 0) const {
    const double u1 = 1.0 - uniform(a, 2 * b);  // (0, 1]
    const double u2 = uniform(a, 2 * b + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  CounterRng substream(std::uint64_t s) const { return CounterRng(seed_, mix(stream_ ^ (s + 1))); }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
};

}  // namespace dspo
