#pragma once

#include <cstdint>
#include <utility>

namespace useg {

// Counter-based splitmix64 generator. A given seed yields the same sequence
// on every platform; fork(i) derives an independent stream for (seed, i)
// addressing so per-sample generation does not depend on visit order.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0,1) with 24-bit resolution; exactly representable as float.
  double uniform() {
    return static_cast<double>(next_u64() >> 40) * (1.0 / 16777216.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

  Rng fork(std::uint64_t index) const {
    Rng r(state_ ^ ((index + 1) * 0xD1B54A32D192ED03ull));
    r.next_u64();
    return r;
  }

 private:
  std::uint64_t state_;
};

// Deterministic Fisher-Yates shuffle driven by the engine Rng.
template <typename It>
void shuffle(It first, It last, Rng& rng) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    std::swap(first[i - 1], first[rng.below(i)]);
  }
}

}  // namespace useg
