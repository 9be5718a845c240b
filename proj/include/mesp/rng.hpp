#pragma once
// Deterministic random number utilities. Everything random in this project
// (parameter init, batch sampling, perturbation draws) goes through these so
// that runs are reproducible from a single seed, independent of the standard
// library's distribution implementations.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace mesp {

// SplitMix64 finalizer. Good avalanche, cheap, stateless.
inline uint64_t mix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Combine a seed with two counters into one well-mixed word. Used for
// counter-based draws where no generator state may persist.
inline uint64_t hash3(uint64_t seed, uint64_t a, uint64_t b) {
  uint64_t h = mix64(seed);
  h = mix64(h ^ (a + 0xA24BAED4963EE407ull));
  h = mix64(h ^ (b + 0x9FB21C651E98DF25ull));
  return h;
}

// Map 64 random bits to a uniform double in the open interval (0, 1).
inline double u64_to_unit(uint64_t h) {
  return (static_cast<double>(h >> 11) + 0.5) * 0x1.0p-53;
}

// Stateless standard normal draw: element `idx` of stream (seed, stream).
// Box-Muller on two counter-derived uniforms. The same (seed, stream, idx)
// always yields the same value, which is what lets MeZO regenerate its
// perturbation direction z instead of storing it.
inline double counter_gauss(uint64_t seed, uint64_t stream, uint64_t idx) {
  double u1 = u64_to_unit(hash3(seed, stream, 2 * idx));
  double u2 = u64_to_unit(hash3(seed, stream, 2 * idx + 1));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

// Small stateful generator for init and data sampling.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(mix64(seed ^ 0xD6E8FEB86659FD93ull)) {}

  uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  double uniform01() { return u64_to_unit(next_u64()); }

  // Uniform integer in [lo, hi]. Modulo bias is negligible for our ranges
  // (all far below 2^32) and keeps the draw sequence trivially portable.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (lo > hi)
      throw std::invalid_argument("uniform_int: empty range [" + std::to_string(lo) + ", " +
                                  std::to_string(hi) + "]");
    uint64_t span = static_cast<uint64_t>(hi - lo + 1);
    return lo + static_cast<int64_t>(next_u64() % span);
  }

  double gauss() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    double u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace mesp
