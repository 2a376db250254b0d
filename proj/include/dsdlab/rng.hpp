#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace dsdlab {

// Seeded generator with platform-independent derived draws. std::mt19937_64
// output is fully specified by the standard, the distributions are not, so the
// helpers below do the mapping themselves.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), rejection sampled to avoid modulo bias.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller (one draw per call, second value discarded).
  double normal();

  std::string serialize() const;
  void deserialize(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

// Mixes a base seed with a stream tag into an independent seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace dsdlab
