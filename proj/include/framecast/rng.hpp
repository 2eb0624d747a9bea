#pragma once

#include <array>
#include <cmath>
#include <cstdint>

#include "framecast/tensor.hpp"

namespace framecast {

// Counter-based RNG (Philox4x32-10). Every random value in the project is a
// pure function of (key, counter), which is what makes tuple-parallel
// sampling and interrupted-training resume bit-exact: independent consumers
// never share mutable generator state.
namespace philox {

struct Block {
  std::array<std::uint32_t, 4> x;
};

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi,
                    std::uint32_t& lo) {
  std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

inline Block block(std::uint64_t key, std::uint64_t counter_hi,
                   std::uint64_t counter_lo) {
  constexpr std::uint32_t kMul0 = 0xD2511F53u;
  constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  constexpr std::uint32_t kW0 = 0x9E3779B9u;
  constexpr std::uint32_t kW1 = 0xBB67AE85u;

  std::uint32_t c0 = static_cast<std::uint32_t>(counter_lo);
  std::uint32_t c1 = static_cast<std::uint32_t>(counter_lo >> 32);
  std::uint32_t c2 = static_cast<std::uint32_t>(counter_hi);
  std::uint32_t c3 = static_cast<std::uint32_t>(counter_hi >> 32);
  std::uint32_t k0 = static_cast<std::uint32_t>(key);
  std::uint32_t k1 = static_cast<std::uint32_t>(key >> 32);

  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kMul0, c0, hi0, lo0);
    mulhilo(kMul1, c2, hi1, lo1);
    std::uint32_t n0 = hi1 ^ c1 ^ k0;
    std::uint32_t n1 = lo1;
    std::uint32_t n2 = hi0 ^ c3 ^ k1;
    std::uint32_t n3 = lo0;
    c0 = n0;
    c1 = n1;
    c2 = n2;
    c3 = n3;
    k0 += kW0;
    k1 += kW1;
  }
  return Block{{c0, c1, c2, c3}};
}

}  // namespace philox

/// SplitMix64-style mixer for deriving stream keys from a seed and tags.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_key(std::uint64_t seed) { return mix64(seed); }
template <typename... Tags>
std::uint64_t derive_key(std::uint64_t seed, std::uint64_t tag, Tags... rest) {
  return derive_key(mix64(seed ^ mix64(tag)), rest...);
}

/// Stateless stream: value i of stream (key) is a pure function of (key, i).
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t key) : key_(key) {}

  /// Uniform double in (0,1), 53-bit resolution.
  double uniform(std::uint64_t i) const {
    return to_unit(word(i));
  }

  std::uint64_t bits(std::uint64_t i) const { return word(i); }

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_int(std::uint64_t i, std::uint64_t n) const {
    // Multiply-shift map; bias is O(n / 2^64), irrelevant here.
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(word(i)) * n) >> 64);
  }

  /// Standard normal, computed in double then cast by the caller.
  double normal(std::uint64_t i) const {
    // Box-Muller over two independent words per index.
    double u1 = to_unit_open(word(2 * i));
    double u2 = to_unit(word(2 * i + 1));
    double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(6.283185307179586476925286766559 * u2);
  }

  template <typename S>
  void fill_normal(Tensor<S>& t, std::uint64_t index_offset = 0) const {
    for (Index i = 0; i < t.size(); ++i)
      t[i] = static_cast<S>(normal(index_offset + static_cast<std::uint64_t>(i)));
  }

  template <typename S>
  Tensor<S> normal_tensor(Shape shape, std::uint64_t index_offset = 0) const {
    Tensor<S> t(std::move(shape));
    fill_normal(t, index_offset);
    return t;
  }

 private:
  std::uint64_t word(std::uint64_t i) const {
    philox::Block b = philox::block(key_, 0, i);
    return (static_cast<std::uint64_t>(b.x[0]) << 32) | b.x[1];
  }
  static double to_unit(std::uint64_t x) {
    return (static_cast<double>(x >> 11) + 0.5) * (1.0 / 9007199254740992.0);
  }
  static double to_unit_open(std::uint64_t x) {
    // Strictly inside (0,1): safe under log().
    return (static_cast<double>(x >> 11) + 0.5) * (1.0 / 9007199254740992.0);
  }

  std::uint64_t key_;
};

}  // namespace framecast
