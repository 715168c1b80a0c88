#pragma once

#include <cstddef>
#include <cstdint>

namespace dart {

/// xorshift64* stream seeded through splitmix64. Gaussians come from
/// Box-Muller over two consecutive uniforms; the second variate of each pair
/// is cached and returned by the next call.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  /// Standard normal.
  double normal();
  /// Normal restricted to [-2, 2] by rejection, times stddev.
  double truncated_normal(double stddev);
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  static std::uint64_t splitmix64(std::uint64_t& x);

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace dart
