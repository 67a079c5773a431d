#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace retseg {

// Counter-based random stream: the value sequence is a pure function of
// (seed, counter), so any consumer can be re-seeded deterministically from
// a key like (run seed, epoch, sample index) without carrying state around.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter) {}

  // Derives an independent stream from a seed and a structured key.
  static RngStream keyed(std::uint64_t seed, std::initializer_list<std::uint64_t> key) {
    std::uint64_t h = mix(seed ^ 0x9e3779b97f4a7c15ull);
    for (std::uint64_t k : key) h = mix(h ^ mix(k + 0x632be59bd9b4e019ull));
    return RngStream(h);
  }

  std::uint64_t next_u64() { return mix(seed_ + 0x9e3779b97f4a7c15ull * ++counter_); }

  std::uint64_t counter() const { return counter_; }
  std::uint64_t seed() const { return seed_; }

  // Uniform in [0, 1), 24 bits of mantissa, exactly representable in f32.
  float uniform() {
    return static_cast<float>(next_u64() >> 40) * (1.0f / 16777216.0f);
  }

  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int uniform_int(int n) {
    return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
  }

  bool bernoulli(float p) { return uniform() < p; }

  // Standard normal via Box-Muller; computed in double, returned as f32.
  float normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 1e-12) u1 = static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
    const double u2 = static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = static_cast<float>(r * std::sin(a));
    have_spare_ = true;
    return static_cast<float>(r * std::cos(a));
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ull;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebull;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t seed_;
  std::uint64_t counter_;
  bool have_spare_ = false;
  float spare_ = 0.0f;
};

}  // namespace retseg
