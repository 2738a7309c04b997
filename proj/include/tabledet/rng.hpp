#pragma once

#include <cstdint>
#include <cmath>

namespace tabledet {

// Deterministic splitmix64-based generator. Distribution code is spelled out
// here so streams are reproducible independent of the standard library.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  // Derive an independent stream from (seed, purpose, id).
  static Rng derive(uint64_t seed, uint64_t purpose, uint64_t id = 0) {
    Rng r(seed ^ (purpose * 0x9E3779B97F4A7C15ull) ^ (id * 0xBF58476D1CE4E5B9ull));
    r.next();  // decorrelate nearby seeds
    r.next();
    return r;
  }

  uint64_t next() {
    uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return (next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t uniform_int(uint64_t n) { return n ? next() % n : 0; }

  // Box-Muller normal.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  uint64_t state_;
};

}  // namespace tabledet
