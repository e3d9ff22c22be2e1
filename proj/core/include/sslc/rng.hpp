#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace sslc {

// Deterministic random source. All distribution code lives here (rather than
// in std:: distributions, whose output is implementation-defined) so that a
// (seed, call sequence) pair fully pins every draw and the state serializes.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, bound) without modulo bias; bound must be > 0.
  std::uint64_t next_below(std::uint64_t bound);

  // Uniform integer in [lo, hi], inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  // Uniform in [0, 1) with 53 bits of randomness.
  double uniform01();

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // One draw with probability p of true.
  bool bernoulli(double p) { return uniform01() < p; }

  // Standard normal via Box-Muller (no cached spare; state is the engine only).
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices drawn from [0, n), returned in increasing order.
  std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k);

  std::string serialize() const;
  static Rng deserialize(const std::string& state);

  bool operator==(const Rng& o) const { return engine_ == o.engine_; }

 private:
  std::mt19937_64 engine_;
};

// Mixes a master seed with stream/index tags into an independent sub-seed.
// Used to give every (step, purpose) its own stream, so disabling one
// training branch never shifts the draws of another.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream,
                          std::uint64_t index = 0);

}  // namespace sslc
