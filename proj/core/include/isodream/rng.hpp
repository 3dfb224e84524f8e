#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace isodream {

// Explicit seeded random stream. Every stochastic draw in the project goes
// through one of these; there is no hidden global RNG.
//
// uniform() maps the top 53 bits of an mt19937_64 draw to [0,1), which is
// bit-stable across platforms. normal() uses the Marsaglia polar method and
// therefore depends on libm's log/sqrt; it is deterministic per platform and
// is never used by the environment (whose trajectories must be portable).
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : gen_(seed) {}

  // Child stream keyed by a label and up to two indices, so that
  // independent consumers (per update, per batch element) cannot
  // interleave draws.
  static RngStream derive(uint64_t seed, std::string_view label,
                          uint64_t a = 0, uint64_t b = 0);

  uint64_t next_u64() { return gen_(); }

  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n) by rejection.
  uint64_t uniform_int(uint64_t n);

  double normal();

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// 64-bit FNV-1a, used to key derived streams and parameter-group seeds.
uint64_t fnv1a64(std::string_view s, uint64_t basis = 0xcbf29ce484222325ULL);
uint64_t mix64(uint64_t x);

}  // namespace isodream
