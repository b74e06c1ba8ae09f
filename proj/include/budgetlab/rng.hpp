#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace budgetlab {

// ---------------------------------------------------------------------------
// Deterministic random streams.
//
// Every random decision in the pipeline draws from an Rng derived from the
// single run seed plus a purpose label and integer coordinates, e.g.
//   Rng::derive(seed, "rollout", step, problem_id, sample_idx)
// so results are independent of scheduling and worker count.
//
// The generator is xoshiro256**; stream derivation is splitmix64 over the
// mixed label/coordinate hash. Hand-rolled (rather than std::mt19937 +
// std::*_distribution) so that draws are pinned down to the bit by this
// header alone.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  // Mixes the seed with a label and coordinates into an independent stream.
  static Rng derive(std::uint64_t seed, const char* label,
                    std::initializer_list<std::uint64_t> coords = {}) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](std::uint64_t v) {
      for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xff;
        h *= 0x100000001b3ull;
      }
    };
    mix(seed);
    for (const char* p = label; *p; ++p) {
      h ^= static_cast<unsigned char>(*p);
      h *= 0x100000001b3ull;
    }
    for (std::uint64_t c : coords) mix(c);
    return Rng(h);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t next_below(std::uint64_t n) {
    // Multiply-shift rejection-free mapping is fine here: n is tiny compared
    // to 2^64, so modulo bias is negligible for test statistics, but use
    // Lemire's method anyway to keep draws exact.
    std::uint64_t x = next_u64();
    __uint128_t m = static_cast<__uint128_t>(x) * static_cast<__uint128_t>(n);
    std::uint64_t l = static_cast<std::uint64_t>(m);
    if (l < n) {
      std::uint64_t t = (0 - n) % n;
      while (l < t) {
        x = next_u64();
        m = static_cast<__uint128_t>(x) * static_cast<__uint128_t>(n);
        l = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  int next_int(int lo, int hi_inclusive) {
    return lo + static_cast<int>(next_below(
                    static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
  }

  // Standard normal via Box-Muller (polar form avoided to keep draw count
  // fixed at two uniforms per call).
  double next_gaussian() {
    double u1 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t s_[4];
};

}  // namespace budgetlab
