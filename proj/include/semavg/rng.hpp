#pragma once

#include <cstdint>

#include "semavg/dist.hpp"

namespace semavg {

// Counter-style random streams: every stream is identified by a 64-bit key,
// and child streams are derived from (key, tag) without consuming state from
// the parent. This is what makes simulation and bootstrap output independent
// of execution order and thread count. The generator itself is xoshiro256++
// seeded through splitmix64; normals come from the inverse CDF so draws do
// not depend on the standard library's normal_distribution.
class RngStream {
 public:
  static RngStream from_seed(uint64_t seed) { return RngStream(mix64(seed)); }

  /// Child stream fully determined by (this stream's key, tag).
  RngStream derive(uint64_t tag) const {
    return RngStream(mix64(key_ + 0x9e3779b97f4a7c15ULL * (tag + 1)));
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform double strictly inside (0,1).
  double uniform01() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Standard normal via inverse-CDF of uniform01().
  double normal() { return dist::norm_quantile(uniform01()); }

  /// Uniform integer in [0, n).
  uint64_t uniform_below(uint64_t n) {
    return static_cast<uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  uint64_t key() const noexcept { return key_; }

 private:
  explicit RngStream(uint64_t key) : key_(key) {
    uint64_t z = key;
    for (auto& s : s_) {
      z += 0x9e3779b97f4a7c15ULL;
      s = mix_state(z);
    }
  }

  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static uint64_t mix_state(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static uint64_t mix64(uint64_t z) { return mix_state(z + 0x9e3779b97f4a7c15ULL); }

  uint64_t key_;
  uint64_t s_[4];
};

}  // namespace semavg
