#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace atompatch {

/// Deterministic RNG. Wraps mt19937_64 (whose raw output is pinned by the
/// standard) and hand-rolls the transforms, because the std distribution
/// objects are implementation-defined and would break cross-platform
/// reproducibility of seeded runs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Requires n > 0.
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(gen_() % n);
  }

  /// Standard normal via Box-Muller. No spare caching: two uniforms are
  /// consumed per draw so the stream position is easy to reason about.
  double normal() {
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();  // (0,1]
    const double u2 = uniform();
    constexpr double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  std::vector<double> normal_vec(std::size_t n, double mean, double sd) {
    std::vector<double> out(n);
    for (auto& v : out) v = normal(mean, sd);
    return out;
  }

  std::vector<double> uniform_vec(std::size_t n, double lo, double hi) {
    std::vector<double> out(n);
    for (auto& v : out) v = uniform(lo, hi);
    return out;
  }

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

/// FNV-1a 64-bit hash, used to derive sub-seeds from strings and configs.
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), h);
}

}  // namespace atompatch
