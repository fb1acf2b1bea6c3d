#pragma once

#include <cmath>
#include <cstdint>

namespace fmpl {

// Counter-based PRNG: output k of stream (seed, id) is a pure function of
// (seed, id, k), so any draw can be reproduced without replaying the stream.
// The mixer is the SplitMix64 finalizer applied to key + k * golden gamma.
//
// Stream ids (fixed; results depend on them):
//   1 phantom geometry          5 teacher training
//   2 deliverable-plan sampler  6 distillation
//   3 case assembly             7 meta-optimizer training
//   4 parameter init            8 planning (latent init)
//   9 metrics / misc tests
struct Rng {
  uint64_t key = 0;
  uint64_t ctr = 0;

  static constexpr uint64_t kGamma = 0x9e3779b97f4a7c15ull;

  static uint64_t mix(uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ull;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebull;
    z ^= z >> 31;
    return z;
  }

  static Rng stream(uint64_t seed, uint64_t stream_id) {
    Rng r;
    r.key = mix(mix(seed + kGamma) ^ mix(stream_id * 0xda942042e4dd58b5ull));
    r.ctr = 0;
    return r;
  }

  // Derive an independent substream (e.g. per case index) deterministically.
  Rng fork(uint64_t sub) const {
    Rng r;
    r.key = mix(key ^ mix(sub + kGamma));
    r.ctr = 0;
    return r;
  }

  uint64_t next_u64() { return mix(key + (++ctr) * kGamma); }

  // [0, 1)
  double uniform() {
    return double(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller without state caching so draws stay counter-addressable.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  uint64_t below(uint64_t n) { return next_u64() % n; }
};

}  // namespace fmpl
