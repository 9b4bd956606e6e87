#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace cdp {

// Deterministic RNG used everywhere. Wraps mt19937_64 with hand-rolled
// distributions so streams do not depend on the standard library version.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : seed_(seed), gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // [0, 1)
  double uniform() { return (gen_() >> 11) * (1.0 / 9007199254740992.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int uniform_int(int n) {
    return static_cast<int>(next_u64() % static_cast<uint64_t>(n));
  }

  // Box-Muller, one value per call (no cached spare, keeps the stream simple).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Derive an independent stream, e.g. per episode or per phase.
  Rng fork(uint64_t salt) const {
    uint64_t s = seed_ * 0xbf58476d1ce4e5b9ull + 0x94d049bb133111ebull;
    s ^= salt * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull;
    s ^= s >> 31;
    return Rng(s);
  }

 private:
  uint64_t seed_;
  std::mt19937_64 gen_;
};

}  // namespace cdp
