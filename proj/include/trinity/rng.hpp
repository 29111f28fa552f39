#pragma once

#include <cstdint>
#include <random>

#include "trinity/tensor.hpp"

namespace trinity {

/// Seeded random source with platform-independent transforms.
/// std::mt19937_64 output is specified bit-exactly by the standard; the
/// distribution transforms are implemented here (not via std::*_distribution,
/// whose output is implementation-defined) so that seeded runs produce
/// identical streams everywhere.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform();

  /// Uniform integer in [0, n), n > 0. Rejection sampling, unbiased.
  uint64_t uniform_below(uint64_t n);

  /// Standard normal via Box-Muller (no cached spare, one draw per call).
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 engine_;
};

/// i.i.d. draws from N(0, sigma^2) with values outside [-3 sigma, 3 sigma]
/// rejected and redrawn. Deterministic under a fixed seed.
Tensor sample_truncated_normal(int64_t count, double sigma, uint64_t seed);

}  // namespace trinity
