#include "trinity/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace trinity {

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

uint64_t Rng::uniform_below(uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng: uniform_below(0)");
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  // Box-Muller; u1 shifted away from zero so log() is safe.
  double u1 = uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1 + 0x1.0p-54));
  return r * std::cos(2.0 * std::numbers::pi * u2);
}

Tensor sample_truncated_normal(int64_t count, double sigma, uint64_t seed) {
  if (sigma <= 0.0) throw std::invalid_argument("sample_truncated_normal: sigma must be > 0");
  if (count < 0) throw std::invalid_argument("sample_truncated_normal: negative count");
  Rng rng(seed);
  std::vector<double> out(static_cast<size_t>(count));
  for (double& v : out) {
    double z;
    do {
      z = rng.normal();
    } while (std::fabs(z) > 3.0);
    v = sigma * z;
  }
  return Tensor::from_data({count}, std::move(out));
}

}  // namespace trinity
