#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace mfr {

/// Counter-based generator. Output i of a stream is
///   splitmix64_mix(splitmix64_mix(seed) + (i + 1) * 0x9E3779B97F4A7C15)
/// so the pair (seed, counter) fully determines every future draw, and the
/// sequence is identical on every platform with 64-bit unsigned arithmetic.
class Rng {
 public:
  constexpr Rng() = default;
  constexpr explicit Rng(std::uint64_t seed, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 bits of resolution.
  double uniform();
  double uniform(double lo, double hi);
  // Unbiased integer in [0, n); n must be positive.
  std::uint64_t uniform_index(std::uint64_t n);
  // Standard normal via Box-Muller; always consumes exactly two draws.
  double normal();

  // Independent child stream keyed by (this seed, stream id). Does not
  // advance this generator.
  Rng derive(std::uint64_t stream) const;

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64_mix(std::uint64_t z);

// Fisher-Yates permutation of 0..n-1 (swap i with a uniform j <= i, i from
// the top down).
std::vector<std::size_t> permutation(std::size_t n, Rng& rng);

}  // namespace mfr
