// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>

namespace goldilocks {

/// splitmix64 finalizer, used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Folds a list of keys (seed, step, id, ...) into one stream seed.
constexpr std::uint64_t derive_seed(std::initializer_list<std::uint64_t> keys) noexcept {
  std::uint64_t h = 0x243f6a8885a308d3ULL;
  for (auto k : keys) h = mix64(h ^ mix64(k));
  return h;
}

// Stream tags so that different consumers of one user seed never share a stream.
namespace stream {
inline constexpr std::uint64_t kDataset = 0x64617461;     // "data"
inline constexpr std::uint64_t kValidation = 0x76616c;    // "val"
inline constexpr std::uint64_t kProjection = 0x70726f6a;  // "proj"
inline constexpr std::uint64_t kRollout = 0x726f6c6c;     // "roll"
inline constexpr std::uint64_t kFormat = 0x666d74;        // "fmt"
inline constexpr std::uint64_t kSelect = 0x73656c;        // "sel"
inline constexpr std::uint64_t kShuffle = 0x736875;       // "shu"
inline constexpr std::uint64_t kInit = 0x696e6974;        // "init"
inline constexpr std::uint64_t kBaseline = 0x62617365;    // "base"
inline constexpr std::uint64_t kDapo = 0x6461706f;        // "dapo"
}  // namespace stream

/// Thin wrapper over mt19937_64 with distribution code that does not depend
/// on the standard library's (implementation-defined) distributions, so
/// datasets and metrics are bit-reproducible across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::initializer_list<std::uint64_t> keys) : engine_(derive_seed(keys)) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n), n > 0. Lemire-free rejection to stay unbiased.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (one value per call; the pair is not cached).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace goldilocks
