// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace largo {

/// Counter-based SplitMix64 generator.
///
/// The i-th output (i = 0, 1, ...) is `mix64(seed + (i + 1) * 0x9E3779B97F4A7C15)`
/// where `mix64` is the SplitMix64 finalizer. The stream is therefore a pure
/// function of (seed, counter), identical on every platform. Normals use the
/// Box-Muller transform on two consecutive uniforms with 53-bit resolution.
class RngState {
 public:
  explicit RngState(std::uint64_t seed = 0) : seed_(seed) {}

  static constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() {
    ++counter_;
    return mix64(seed_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n) without modulo bias.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  double normal() {
    // 1 - u keeps the log argument in (0, 1].
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Independent child stream keyed by `stream`; does not advance this one.
  RngState fork(std::uint64_t stream) const {
    return RngState(mix64(seed_ ^ mix64(stream + 0x632BE59BD9B4E019ULL)));
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace largo
