#pragma once

// Counter-based random streams. Every draw is a pure function of
// (key, counter), so sample i of iteration t can be produced on any thread
// in any order and still match a serial run bit for bit.

#include "cdbo/core.hpp"

#include <array>
#include <cstdint>
#include <numbers>

namespace cdbo::rng {

/// Philox4x32 with 10 rounds (Salmon et al., SC'11).
class Philox4x32 {
 public:
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static Counter generate(Counter ctr, Key key) {
    for (int round = 0; round < 10; ++round) {
      if (round > 0) {
        key[0] += kW0;
        key[1] += kW1;
      }
      ctr = single_round(ctr, key);
    }
    return ctr;
  }

 private:
  static constexpr std::uint32_t kM0 = 0xD2511F53u;
  static constexpr std::uint32_t kM1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kW0 = 0x9E3779B9u;
  static constexpr std::uint32_t kW1 = 0xBB67AE85u;

  static Counter single_round(const Counter& c, const Key& k) {
    const std::uint64_t p0 = std::uint64_t{kM0} * c[0];
    const std::uint64_t p1 = std::uint64_t{kM1} * c[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
  }
};

/// Separates the purposes a single master seed is used for.
enum class Domain : std::uint32_t {
  smoothing_sample = 0,
  output_index = 1,
  initialization = 2,
  audit = 3,
  test = 0xFFFFu,
};

inline std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// A stream addressed by (seed, domain, a, b), with a and b below 2^32.
/// Blocks are consumed in order; each block yields four 32-bit words.
class Stream {
 public:
  Stream(std::uint64_t seed, Domain domain, std::uint64_t a, std::uint64_t b)
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
        domain_(static_cast<std::uint32_t>(domain)),
        a_(a),
        b_(b) {}

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() {
    const std::uint32_t hi = next_word();
    const std::uint32_t lo = next_word();
    const std::uint64_t bits = (std::uint64_t{hi >> 5} << 26) | (lo >> 6);
    return static_cast<double>(bits) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  Vector normal_vector(Eigen::Index n) {
    Vector v(n);
    for (Eigen::Index j = 0; j < n; ++j) v[j] = normal();
    return v;
  }

 private:
  std::uint32_t next_word() {
    if (word_ == 4) {
      // Counter layout: block index, domain, a, b. Indices past 2^32 wrap.
      const Philox4x32::Counter ctr{block_, domain_, static_cast<std::uint32_t>(a_),
                                    static_cast<std::uint32_t>(b_)};
      buffer_ = Philox4x32::generate(ctr, key_);
      ++block_;
      word_ = 0;
    }
    return buffer_[word_++];
  }

  Philox4x32::Key key_;
  std::uint32_t domain_;
  std::uint64_t a_;
  std::uint64_t b_;
  std::uint32_t block_ = 0;
  Philox4x32::Counter buffer_{};
  int word_ = 4;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace cdbo::rng
