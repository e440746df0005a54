#pragma once

#include <cstdint>

namespace dsmoe {

// Deterministic, platform-independent PRNG used for all synthetic data.
//
// Stream generator: xoshiro256++ (Blackman/Vigna), state seeded through
// SplitMix64. Uniform doubles come from the top 53 bits; Gaussian variates
// use the Irwin-Hall sum of 12 uniforms, which needs only IEEE add/mul and
// therefore reproduces bit-identically on any conforming platform (libm
// transcendentals do not).

class SplitMix64 {
 public:
  explicit SplitMix64(uint64_t seed) : state_(seed) {}

  uint64_t next() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  uint64_t state_;
};

class Xoshiro256pp {
 public:
  explicit Xoshiro256pp(uint64_t seed) {
    SplitMix64 sm(seed);
    for (auto& s : state_) s = sm.next();
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Approximately N(0, 1): sum of 12 unit uniforms minus 6 (Irwin-Hall).
  double next_gaussian() {
    double acc = 0.0;
    for (int i = 0; i < 12; ++i) acc += next_unit();
    return acc - 6.0;
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t state_[4];
};

}  // namespace dsmoe
