// Counter-based deterministic random generator.
//
// Every draw is addressed by (seed, key...) instead of consuming sequential
// state, so independent consumers can sample in any order (or in parallel)
// and still reproduce bit-identical streams.
#pragma once

#include <cmath>
#include <cstdint>

namespace dne {

namespace detail {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ull;

constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

constexpr std::uint64_t combine(std::uint64_t h, std::uint64_t k) {
  return mix64(h + kGolden + k * 0xff51afd7ed558ccdull);
}

}  // namespace detail

// Stateless generator: all methods are const and pure in (seed, keys).
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  template <class... Keys>
  std::uint64_t bits(Keys... keys) const {
    std::uint64_t h = detail::mix64(seed_ ^ 0x6a09e667f3bcc909ull);
    ((h = detail::combine(h, static_cast<std::uint64_t>(keys))), ...);
    return detail::mix64(h);
  }

  // Uniform in [0, 1).
  template <class... Keys>
  double uniform(Keys... keys) const {
    return static_cast<double>(bits(keys...) >> 11) * 0x1.0p-53;
  }

  // Uniform in [lo, hi).
  template <class... Keys>
  double uniform_in(double lo, double hi, Keys... keys) const {
    return lo + (hi - lo) * uniform(keys...);
  }

  // Standard normal via Box-Muller on two decorrelated sub-streams.
  template <class... Keys>
  double normal(Keys... keys) const {
    const std::uint64_t h = bits(keys...);
    const std::uint64_t b1 = detail::mix64(h ^ 0xd1b54a32d192ed03ull);
    const std::uint64_t b2 = detail::mix64(h ^ 0x8cb92ba72f3d8dd7ull);
    // Offset keeps u1 strictly inside (0, 1) so log() is finite.
    const double u1 = (static_cast<double>(b1 >> 11) + 0.5) * 0x1.0p-53;
    const double u2 = static_cast<double>(b2 >> 11) * 0x1.0p-53;
    constexpr double kTwoPi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
  }

 private:
  std::uint64_t seed_;
};

}  // namespace dne
