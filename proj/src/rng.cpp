#include "sor/rng.hpp"

#include <cmath>

#include "sor/stats.hpp"

namespace sor {

double Rng::normal() { return normal_quantile(uniform_pos()); }

double Rng::logistic() {
  const double u = uniform_pos();
  return std::log(u) - std::log1p(-u);
}

std::uint64_t derive_stream(std::uint64_t master, std::uint64_t a, std::uint64_t b) {
  // Run the inputs through two rounds of the splitmix finalizer so nearby
  // (master, a, b) triples land far apart in state space.
  Rng mix(master ^ (0x9E3779B97F4A7C15ULL * (a + 1)) ^ (0xBF58476D1CE4E5B9ULL * (b + 1)));
  mix.next_u64();
  return mix.next_u64();
}

}  // namespace sor
