#pragma once

#include <cstdint>
#include <random>

namespace mergevit {

// All randomness in the project flows through Rng so that a (config, seed)
// pair reproduces bit-identical results within one build.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }

  // Integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(gen_);
  }

  double normal(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(gen_);
  }

  // Normal(0, stddev) resampled until |x| <= 2*stddev.
  double truncated_normal(double stddev) {
    for (;;) {
      const double x = normal(0.0, stddev);
      if (x >= -2.0 * stddev && x <= 2.0 * stddev) return x;
    }
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

// splitmix64: used to derive independent per-item seeds from a base seed,
// so dataset items can be generated in any order.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace mergevit
