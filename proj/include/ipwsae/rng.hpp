#pragma once

#include <cstddef>
#include <cstdint>
#include <random>

namespace ipwsae {

// Deterministic substream derivation. A stream is identified by the master
// seed plus a path of integer keys, e.g. (seed, replication, area).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t key);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  // Independent of how many draws were taken from *this.
  Rng substream(std::uint64_t key) const { return Rng(mix_seed(seed_, key)); }

  std::uint64_t seed() const { return seed_; }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double normal(double mean, double sd) {
    return std::normal_distribution<double>(mean, sd)(engine_);
  }
  bool bernoulli(double p) { return uniform() < p; }
  // Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace ipwsae
