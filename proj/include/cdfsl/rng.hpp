#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string_view>
#include <vector>

#include "cdfsl/errors.hpp"

namespace cdfsl {

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Counter-based splittable PRNG. A stream is (key, counter); outputs are the
// splitmix64 finalizer applied to key + GOLDEN*counter. Splitting derives a
// new independent key, so every stochastic site in the project can own a
// stream addressed by (seed, purpose, epoch, index, ...) and runs replay
// bit-identically regardless of what other sites consumed.
class RngStream {
 public:
  explicit RngStream(std::uint64_t key) : key_(finalize(key ^ kStreamSalt)) {}

  RngStream split(std::uint64_t tag) const {
    RngStream s(0);
    s.key_ = finalize(key_ ^ finalize(tag + kSplitSalt));
    s.counter_ = 0;
    return s;
  }
  RngStream split(std::string_view tag) const { return split(fnv1a64(tag)); }

  std::uint64_t next_u64() { return finalize(key_ + kGolden * ++counter_); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int uniform_int(int n) {
    if (n <= 0) throw ValidationError("uniform_int: n must be positive");
    unsigned __int128 wide =
        static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(n);
    return static_cast<int>(wide >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller; consumes two raw draws per call.
  double normal() {
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  // Normal truncated to +-limit standard deviations, then scaled.
  double trunc_normal(double stddev, double limit = 2.0) {
    for (;;) {
      double z = normal();
      if (std::fabs(z) <= limit) return z * stddev;
    }
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      int j = uniform_int(i + 1);
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

  // First k of a shuffled [0, n) index range, without replacement.
  std::vector<int> sample_without_replacement(int n, int k) {
    if (k > n) throw CapacityError("sample_without_replacement: k > n");
    std::vector<int> idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    shuffle(idx);
    idx.resize(static_cast<size_t>(k));
    return idx;
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;
  static constexpr std::uint64_t kStreamSalt = 0x6a09e667f3bcc908ULL;
  static constexpr std::uint64_t kSplitSalt = 0xbb67ae8584caa73bULL;
  static constexpr double kPi = 3.141592653589793238462643383279502884;

  static std::uint64_t finalize(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ULL;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// Derives the stream for a named stochastic site. Path elements address
// nested scopes, e.g. derive_stream(seed, {kCurriculum, kAugWeak, epoch}).
inline RngStream derive_stream(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  RngStream s(seed);
  for (std::uint64_t p : path) s = s.split(p);
  return s;
}

// Stream purpose tags. Stable values: they participate in run reproducibility.
namespace stream_tag {
inline constexpr std::uint64_t kManifest = 1;
inline constexpr std::uint64_t kClip = 2;
inline constexpr std::uint64_t kInitEncoder = 3;
inline constexpr std::uint64_t kInitHead = 4;
inline constexpr std::uint64_t kPretrainOrder = 5;
inline constexpr std::uint64_t kPretrainMask = 6;
inline constexpr std::uint64_t kOrderSource = 7;
inline constexpr std::uint64_t kOrderTarget = 8;
inline constexpr std::uint64_t kAugSource = 9;
inline constexpr std::uint64_t kAugWeak = 10;
inline constexpr std::uint64_t kAugStrong = 11;
inline constexpr std::uint64_t kEpisode = 12;
}  // namespace stream_tag

}  // namespace cdfsl
