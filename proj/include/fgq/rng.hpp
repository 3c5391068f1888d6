#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string_view>
#include <utility>
#include <vector>

namespace fgq {

/// Deterministic random source. All sampling in the project goes through
/// this class so that runs are bit-reproducible for a given seed: the
/// normal/uniform sequences are implemented here instead of relying on
/// the standard library's unspecified distribution algorithms.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

  uint64_t next_u64() {
    // splitmix64
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (no state caching, one value per call).
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1], keeps log() finite
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793238 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Integer in [0, n).
  uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

  int sign() { return (next_u64() & 1) ? 1 : -1; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
};

/// Derives an independent stream seed from a master seed and a tag, so the
/// various consumers (model init, dataset inputs, noise, ...) never share
/// a sequence.
inline uint64_t derive_seed(uint64_t master, std::string_view tag) {
  uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a over the tag
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  Rng mix(master ^ h);
  return mix.next_u64();
}

}  // namespace fgq
