#pragma once

// Deterministic, platform-stable random streams. Every consumer derives its
// stream from (seed, context...) so reruns and checkpoint resumes replay the
// exact same draws regardless of call interleaving.

#include <cstdint>
#include <cmath>

namespace latte {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) { return splitmix64(a ^ (b + 0x9e3779b97f4a7c15ull)); }

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(splitmix64(seed)) {}

  Rng(uint64_t seed, uint64_t stream) : state_(splitmix64(hash_combine(seed, stream))) {}

  uint64_t next_u64() {
    state_ = state_ * 6364136223846793005ull + 1442695040888963407ull;
    return splitmix64(state_);
  }

  /// Uniform in [0, 1).
  double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  uint64_t next_below(uint64_t n) { return next_u64() % n; }

  /// Standard normal via Box-Muller; two uniforms per draw, no cached spare.
  double next_normal() {
    double u1 = next_uniform();
    double u2 = next_uniform();
    // avoid log(0)
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

 private:
  uint64_t state_;
};

template <typename Tn>
void fill_normal(Tn& t, Rng& rng, double mean = 0.0, double stddev = 1.0) {
  for (auto i = decltype(t.size())(0); i < t.size(); ++i)
    t[i] = static_cast<std::decay_t<decltype(t[0])>>(mean + stddev * rng.next_normal());
}

}  // namespace latte
