#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace sdvlm {

// FNV-1a, used for config hashes, checkpoint checksums and seed derivation.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), h);
}

// Deterministic RNG with explicit distributions. std::mt19937_64 is
// standardized, but the std distributions are implementation-defined, so we
// roll the few we need on top of splitmix64 to keep artifacts byte-stable.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n)
  uint64_t uniform_int(uint64_t n) { return n ? next_u64() % n : 0; }

  // standard normal via Box-Muller
  double gauss() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double gauss(double mean, double stddev) { return mean + stddev * gauss(); }

  // current state; Rng(state()) replays the remaining sequence
  uint64_t state_copy() const { return state_; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = uniform_int(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
};

// All randomness flows from one root seed; per-module streams are derived by
// hashing a textual tag into the root. Documented in the README.
inline uint64_t derive_seed(uint64_t root, std::string_view tag) {
  uint64_t h = fnv1a64(tag);
  return fnv1a64(&root, sizeof(root), h) ^ 0x6a09e667f3bcc908ull;
}

}  // namespace sdvlm
