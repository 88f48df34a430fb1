#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace drift {

// Deterministic random source. The engine is std::mt19937_64 (its output
// sequence is pinned by the standard); the distributions are hand-rolled so
// results do not depend on the standard library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform double in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n). n must be positive.
  std::int64_t uniform_int(std::int64_t n) {
    return static_cast<std::int64_t>(engine_() % static_cast<std::uint64_t>(n));
  }

  // Standard normal via Box-Muller; draws are cached in pairs.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * M_PI * u2;
    cached_ = radius * std::sin(angle);
    has_cached_ = true;
    return radius * std::cos(angle);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::int64_t i = static_cast<std::int64_t>(items.size()) - 1; i > 0; --i) {
      const std::int64_t j = uniform_int(i + 1);
      std::swap(items[i], items[static_cast<std::size_t>(j)]);
    }
  }

  // Derives an independent stream seed from a base seed and a tag
  // (FNV-1a folding, so streams for different purposes do not overlap).
  static std::uint64_t mix(std::uint64_t seed, std::string_view tag,
                           std::uint64_t index = 0) {
    std::uint64_t h = 0xcbf29ce484222325ULL ^ seed;
    constexpr std::uint64_t kPrime = 0x100000001b3ULL;
    for (const char c : tag) {
      h = (h ^ static_cast<std::uint8_t>(c)) * kPrime;
    }
    for (int i = 0; i < 8; ++i) {
      h = (h ^ ((index >> (8 * i)) & 0xff)) * kPrime;
    }
    return h;
  }

 private:
  std::mt19937_64 engine_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace drift
