#pragma once

#include <cstdint>
#include <random>

#include "falcon/common.hpp"

namespace falcon {

// Deterministic RNG. The transforms below avoid std::*_distribution so a
// given seed produces the same stream on every standard library.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // uniform in [0, 1)
  Scalar next_unit() {
    return static_cast<Scalar>(next_u64() >> 11) * 0x1.0p-53;
  }

  // uniform in [lo, hi)
  Scalar next_uniform(Scalar lo, Scalar hi) {
    return lo + (hi - lo) * next_unit();
  }

  // uniform integer in [0, n)
  uint64_t next_index(uint64_t n) {
    if (n == 0) raise(ErrorKind::Domain, "next_index: n must be positive");
    // rejection sampling keeps the draw unbiased
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // standard normal via Box-Muller
  Scalar next_gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    Scalar u, v, s;
    do {
      u = next_uniform(-1.0, 1.0);
      v = next_uniform(-1.0, 1.0);
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    Scalar m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    have_spare_ = true;
    return u * m;
  }

  // derive an independent stream, e.g. one per epoch or per worker
  Rng fork(uint64_t salt) {
    return Rng(next_u64() ^ (salt * 0x9e3779b97f4a7c15ull));
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  Scalar spare_ = 0.0;
};

}  // namespace falcon
