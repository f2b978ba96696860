#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace csnet {

// Deterministic PRNG (xoshiro256**) with explicit distributions so that
// results are bit-identical across platforms and standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& si : s_) si = splitmix64(x);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n).
  int64_t below(int64_t n) { return int64_t(next_u64() % uint64_t(n)); }

  // Standard normal via Box-Muller (no state caching, deterministic).
  double normal() {
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool coin(double p = 0.5) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = size_t(below(int64_t(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t s_[4];
};

inline uint64_t hash_str(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Derives an independent child seed from a base seed and a tag. All
// randomness in a run flows from one root seed through these splits.
inline uint64_t split_seed(uint64_t seed, const std::string& tag) {
  uint64_t x = seed ^ hash_str(tag);
  return Rng::splitmix64(x);
}

inline uint64_t split_seed(uint64_t seed, const std::string& tag, int64_t index) {
  return split_seed(seed, tag + "#" + std::to_string(index));
}

}  // namespace csnet
