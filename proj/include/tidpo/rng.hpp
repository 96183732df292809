#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace tidpo {

// splitmix64 step; used to derive decorrelated sub-stream seeds from one
// base seed so that e.g. "shuffle stream" and "anchor stream" never overlap.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Hash-combine a base seed with a stream tag. Two distinct tags give
// unrelated streams even when base seeds are small consecutive integers.
inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
  uint64_t s = base;
  uint64_t a = splitmix64(s);
  s ^= stream + 0x9E3779B97F4A7C15ull + (s << 6) + (s >> 2);
  uint64_t b = splitmix64(s);
  return a ^ (b + 0x165667B19E3779F9ull + (a << 12));
}

// Deterministic RNG. The engine (mt19937_64) is pinned by the standard;
// the distributions are hand-rolled because std:: distribution output is
// implementation-defined and would break bit-for-bit reproducibility.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform double in [0, 1) with 53 bits of resolution.
  double next_uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; caches the second variate.
  double next_gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = next_uniform();
    while (u1 <= 0.0) u1 = next_uniform();  // log(0) guard
    const double u2 = next_uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Uniform index in [0, n). Multiply-shift keeps bias below n / 2^64.
  int64_t next_index(int64_t n) {
    return static_cast<int64_t>(
        (static_cast<unsigned __int128>(engine_()) *
         static_cast<unsigned __int128>(n)) >> 64);
  }

  // In-place Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[next_index(i + 1)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace tidpo
