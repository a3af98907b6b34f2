#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>

namespace layoutseq {

/// Deterministic random source built on std::mt19937_64 (whose output
/// sequence is fixed by the C++ standard). Distributions are implemented
/// here rather than taken from <random> so streams are identical across
/// standard libraries.
///
/// Consumers never share a stream: call split() with a distinct name for data
/// shuffling, dropout, sampling and so on.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const noexcept { return seed_; }

  /// Independent child stream keyed by name. Does not advance this stream.
  Rng split(std::string_view stream) const;
  Rng split(std::uint64_t stream) const;

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [0, n); n must be positive.
  std::size_t uniform_index(std::size_t n);
  bool bernoulli(double p) { return uniform() < p; }
  /// Standard normal (Box-Muller, no cached second value).
  double normal();
  /// Normal(0, stddev) resampled until within bound_sigmas * stddev.
  double truncated_normal(double stddev, double bound_sigmas = 2.0);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// SplitMix64 finalizer; used for seed derivation and hashing.
std::uint64_t mix64(std::uint64_t x);
/// FNV-1a over bytes.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace layoutseq
