#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>

namespace svfreg {

/// Counter-based generator. Output n of a stream is
///   mix64(key + n * 0x9E3779B97F4A7C15)
/// where mix64 is the SplitMix64 finalizer and key = mix64(seed ^ mix64(stream + 1)).
/// split(s) derives an independent child stream without advancing the parent,
/// so every consumer (dropout layer, MC sample, phantom texture) gets a stream
/// that depends only on (seed, path of split ids).
class CounterRng {
 public:
  using result_type = std::uint64_t;

  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0) : key_(mix64(seed ^ mix64(stream + 1))) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return mix64(key_ + (counter_++) * kGamma); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (one value per call, no caching).
  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  CounterRng split(std::uint64_t stream) const { return CounterRng(key_, stream); }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  static constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace svfreg
