#pragma once

#include <cstdint>
#include <limits>
#include <string_view>

namespace rise {

/// Splittable counter-based generator.
///
/// Output i is a SplitMix64-style hash of (key, i). Children derived with
/// split() get an independent key, so labeled sub-streams never overlap and
/// can be created in any order without affecting each other. Satisfies
/// UniformRandomBitGenerator so std distributions can draw from it.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0);

  /// Child stream identified by a label; does not advance this stream.
  Rng split(std::string_view label) const;
  /// Child stream identified by an index; does not advance this stream.
  Rng split(std::uint64_t index) const;

  result_type operator()();
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller (stateless, consumes two words).
  double normal();
  bool bernoulli(double p) { return uniform() < p; }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  Rng(std::uint64_t key, std::uint64_t counter, int) : key_(key), counter_(counter) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t z);
std::uint64_t hash_label(std::string_view label);

}  // namespace rise
