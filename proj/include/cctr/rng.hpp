#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace cctr {

// Combines a base seed with a stream index (splitmix64 finalizer).
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream);

// Deterministic random source. The engine is std::mt19937_64, whose output
// sequence is fixed by the standard; the distributions are implemented here
// because the standard library ones are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer on [0, bound), rejection sampled.
  std::size_t below(std::size_t bound);
  // Standard normal via Box-Muller; the spare variate is cached.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace cctr
