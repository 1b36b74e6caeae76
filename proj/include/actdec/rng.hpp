#pragma once

#include <cstdint>

namespace actdec {

/// PCG-XSH-RR 64/32 generator (O'Neill, "PCG: A Family of Simple Fast
/// Space-Efficient Statistically Good Algorithms", pcg32_srandom_r seeding).
///
/// Every random quantity in the project (model weights, synthetic datasets,
/// property-test inputs) flows through this generator so that golden files are
/// reproducible from a seed alone. std::*_distribution is deliberately not used
/// because its output is implementation-defined.
class Pcg32 {
public:
  static constexpr std::uint64_t kDefaultStream = 54u;

  explicit Pcg32(std::uint64_t seed, std::uint64_t stream = kDefaultStream);

  std::uint32_t next_u32();

  /// Uniform in [0, bound). Lemire-free rejection method; bound must be > 0.
  std::uint32_t uniform_below(std::uint32_t bound);

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();

  /// Standard normal via the Box-Muller cosine branch (one normal per two
  /// 53-bit uniforms; no cached spare, so the stream position is predictable).
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
  std::uint64_t state_ = 0;
  std::uint64_t inc_ = 0;
};

}  // namespace actdec
