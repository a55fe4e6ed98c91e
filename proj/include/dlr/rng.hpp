#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace dlr {

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic RNG used everywhere. All distributions are implemented by
// hand on top of mt19937_64 so that streams are identical across platforms
// and standard library versions. Streams are split from a single seed via
// labels: child seed = splitmix64(seed ^ fnv1a64(label)).
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed), base_seed_(seed) {}

  Rng split(std::string_view label) const {
    return Rng(splitmix64(base_seed_ ^ fnv1a64(label)));
  }

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Unbiased via rejection.
  uint64_t bounded(uint64_t n) {
    if (n == 0) return 0;
    uint64_t threshold = -n % n;  // 2^64 mod n
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    have_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

  // Standard Gumbel(0, 1): -log(-log(U)).
  double gumbel() {
    double u = uniform();
    if (u <= 1e-300) u = 1e-300;
    return -std::log(-std::log(u));
  }

  // Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = bounded(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct items from [0, n), in draw order.
  std::vector<size_t> sample_without_replacement(size_t n, size_t k) {
    std::vector<size_t> pool(n);
    for (size_t i = 0; i < n; ++i) pool[i] = i;
    std::vector<size_t> out;
    out.reserve(k);
    for (size_t i = 0; i < k && i < n; ++i) {
      size_t j = i + bounded(n - i);
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
    return out;
  }

 private:
  std::mt19937_64 engine_;
  uint64_t base_seed_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

inline Rng make_rng(uint64_t seed, std::string_view stream) {
  return Rng(splitmix64(seed ^ fnv1a64(stream)));
}

}  // namespace dlr
