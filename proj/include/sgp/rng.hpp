#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace sgp {

// Counter-based generator: draw i is a pure function of (key, i), so streams can be
// split without sharing state and results never depend on platform distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), key_(mix(seed ^ 0x9E3779B97F4A7C15ULL)) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  // Independent child stream; does not advance this generator.
  Rng split(std::uint64_t stream) const {
    Rng child(seed_);
    child.key_ = mix(key_ ^ mix(stream + 0xD1B54A32D192ED03ULL));
    return child;
  }

  std::uint64_t next_u64() { return mix(key_ + mix(counter_++)); }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }
  int range(int lo, int hi_inclusive) {
    return lo + int(below(std::uint64_t(hi_inclusive - lo + 1)));
  }

  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename V>
  void shuffle(std::vector<V>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = std::size_t(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  static std::uint64_t mix(std::uint64_t z) {
    // splitmix64 finalizer
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace sgp
