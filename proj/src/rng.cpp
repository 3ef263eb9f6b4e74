#include "tslformer/rng.hpp"

#include <cmath>
#include <numbers>

namespace tslformer {

double Rng::normal() noexcept {
  double u1 = uniform();
  double u2 = uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Rng Rng::fork(std::uint64_t stream) const noexcept {
  Rng mixer(seed_ ^ 0xD1B54A32D192ED03ULL, stream);
  return Rng(mixer.next_u64());
}

}  // namespace tslformer
