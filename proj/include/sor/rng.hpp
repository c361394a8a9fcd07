#pragma once

#include <cstdint>

namespace sor {

// Counter-free splitmix64 generator (Steele, Lea & Flood 2014; Vigna 2015).
// Used instead of <random> engines so that draws are bit-identical across
// platforms and standard-library versions.  Substreams for parallel work are
// derived with derive_stream(); replicate results therefore do not depend on
// which worker thread runs them.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on (0, 1); rejects the (probability 2^-53) exact zero.
  double uniform_pos() {
    double u;
    do {
      u = uniform();
    } while (u <= 0.0);
    return u;
  }

  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal by CDF inversion (see stats.hpp); defined in rng.cpp to
  // avoid a header cycle.
  double normal();
  double normal(double mu, double sd) { return mu + sd * normal(); }

  // Standard logistic draw.
  double logistic();

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

// Deterministic substream key from a master seed and up to two indices
// (e.g. scenario id and replicate number).  Distinct inputs give streams
// that are decorrelated by the splitmix finalizer.
std::uint64_t derive_stream(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0);

}  // namespace sor
