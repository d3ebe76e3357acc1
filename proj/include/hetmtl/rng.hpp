#pragma once

// Portable seeded randomness.
//
// The engine is std::mt19937_64, whose output sequence is fixed by the C++
// standard. The standard distributions are not (libstdc++ and libc++ disagree
// on normal_distribution and shuffle), so the few draws this project needs are
// implemented here on top of the raw 64-bit stream.
//
// Stream splitting: a child stream is seeded with
//   splitmix64(splitmix64(base ^ tag_hash) + index)
// where tag_hash is FNV-1a over the tag string. Different (tag, index) pairs
// give statistically independent streams, and adding a new stream never shifts
// the draws of an existing one.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace hetmtl {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline constexpr std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                                           std::uint64_t index = 0) noexcept {
  return splitmix64(splitmix64(base ^ fnv1a64(tag)) + index);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Independent child stream; does not advance this generator.
  static Rng stream(std::uint64_t base, std::string_view tag, std::uint64_t index = 0) {
    return Rng(derive_seed(base, tag, index));
  }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Unbiased uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_index(std::uint64_t n) {
    // threshold == 2^64 mod n; the accepted range has a length divisible by n.
    const std::uint64_t threshold = (std::uint64_t{0} - n) % n;
    std::uint64_t x = engine_();
    while (x < threshold) x = engine_();
    return x % n;
  }

  /// Standard normal via the Box-Muller transform; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  /// Fisher-Yates shuffle with a portable index draw.
  template <class T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_index(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  template <class T>
  void shuffle(std::vector<T>& items) {
    shuffle(std::span<T>(items));
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace hetmtl
