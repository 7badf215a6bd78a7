#pragma once

#include <cstdint>
#include <random>

namespace convcut {

// Seedable generator used for every stochastic step (init, shuffling, flips,
// dropout). The engine is std::mt19937_64, whose output sequence is fixed by
// the C++ standard. The distribution transforms below are written out by hand
// because the <random> distributions are implementation-defined, so results
// are reproducible bit-for-bit across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform();

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_index(std::uint64_t n);

  // Standard normal via Box-Muller (one draw per call, the pair's second
  // value is discarded).
  double normal();

  // Normal with the given std, resampled until it lies within +/-2 std.
  double truncated_normal(double stddev);

 private:
  std::mt19937_64 engine_;
};

}  // namespace convcut
