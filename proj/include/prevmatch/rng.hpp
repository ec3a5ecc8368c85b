#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace prevmatch {

/// Counter-based pseudo-random generator ("splitmix64 in counter mode").
///
/// The i-th output of a stream with key k is mix64(k + i * GAMMA), so a
/// stream is a pure function of (key, counter). Substreams are derived with
/// fork(a, b, c), which hashes the tags into a fresh key; forked streams
/// never share outputs with the parent or with siblings forked under
/// different tags. All experiment randomness is drawn from substreams of a
/// single master seed, keyed by purpose (see rng_site below), so adding or
/// removing one consumer cannot shift the draws seen by another.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(key) {}

  static CounterRng seeded(std::uint64_t seed) {
    return CounterRng(mix64(seed + kSeedTag));
  }

  CounterRng fork(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
    std::uint64_t k = mix64(key_ + kForkTag);
    k = mix64(k + mix64(a + kTagA));
    k = mix64(k + mix64(b + kTagB));
    k = mix64(k + mix64(c + kTagC));
    return CounterRng(k);
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() { return mix64(key_ + kGamma * ++counter_); }

  /// Uniform on [0, 1) with 53 random bits.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  /// Uniform on {0, ..., n-1}; rejection keeps the law exact.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_int: n must be positive");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return next_double() < p; }

  /// Standard normal via Box-Muller; the spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u = 1.0 - next_double();  // (0, 1], keeps log finite
    const double v = next_double();
    const double r = std::sqrt(-2.0 * std::log(u));
    const double theta = 2.0 * kPi * v;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  /// Gamma(shape, 1) via Marsaglia-Tsang squeeze; shape < 1 uses the
  /// standard boost Gamma(shape+1) * U^(1/shape).
  double gamma(double shape) {
    if (!(shape > 0.0)) throw std::invalid_argument("gamma: shape must be positive");
    if (shape < 1.0) {
      const double u = 1.0 - next_double();
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = 1.0 - next_double();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  /// Fisher-Yates draw of k distinct values from {0, ..., n-1}.
  std::vector<int> sample_distinct(int k, int n) {
    if (k < 0 || k > n) throw std::invalid_argument("sample_distinct: need 0 <= k <= n");
    std::vector<int> pool(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < k; ++i) {
      const int j = i + static_cast<int>(uniform_int(static_cast<std::uint64_t>(n - i)));
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
    }
    pool.resize(static_cast<std::size_t>(k));
    return pool;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  static std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

 private:
  static constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ull;
  static constexpr std::uint64_t kSeedTag = 0x5eed5eed5eed5eedull;
  static constexpr std::uint64_t kForkTag = 0xf02cf02cf02cf02cull;
  static constexpr std::uint64_t kTagA = 0xa11ce5;
  static constexpr std::uint64_t kTagB = 0xb0b5;
  static constexpr std::uint64_t kTagC = 0xcafe;
  static constexpr double kPi = 3.14159265358979323846;

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Substream purposes. Every random decision in a run draws from
/// master.fork(site, ...), so streams for different purposes are
/// independent by construction and resuming a run never replays or skips
/// draws belonging to another site.
namespace rng_site {
constexpr std::uint64_t kSceneGen = 1;      // fork(kSceneGen, split_id, scene_index)
constexpr std::uint64_t kModelInit = 2;     // fork(kModelInit)
constexpr std::uint64_t kEpochShuffle = 3;  // fork(kEpochShuffle, epoch)
constexpr std::uint64_t kAugment = 4;       // fork(kAugment, epoch, step)
constexpr std::uint64_t kPrevGuidance = 5;  // fork(kPrevGuidance, epoch, step)
}  // namespace rng_site

}  // namespace prevmatch
