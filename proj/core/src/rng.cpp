#include "sslc/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "sslc/util.hpp"

namespace sslc {

std::uint64_t Rng::next_below(std::uint64_t bound) {
  if (bound == 0) throw Error("Rng::next_below: bound must be > 0");
  // Rejection sampling over the largest multiple of bound.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % bound;
}

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (lo > hi) throw Error("Rng::uniform_int: empty range");
  const std::uint64_t span =
      static_cast<std::uint64_t>(hi) - static_cast<std::uint64_t>(lo) + 1;
  if (span == 0) return static_cast<std::int64_t>(next_u64());  // full range
  return lo + static_cast<std::int64_t>(next_below(span));
}

double Rng::uniform01() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  // Box-Muller, discarding the second variate to keep state == engine state.
  double u1;
  do {
    u1 = uniform01();
  } while (u1 <= 0.0);
  const double u2 = uniform01();
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<std::size_t> Rng::sample_indices(std::size_t n, std::size_t k) {
  if (k > n) throw Error("Rng::sample_indices: k > n");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  // Partial Fisher-Yates: the first k slots end up a uniform k-subset.
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(next_below(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::string Rng::serialize() const {
  std::ostringstream ss;
  ss << engine_;
  return ss.str();
}

Rng Rng::deserialize(const std::string& state) {
  Rng r;
  std::istringstream ss(state);
  ss >> r.engine_;
  if (!ss) throw Error("Rng::deserialize: malformed state string");
  return r;
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream,
                          std::uint64_t index) {
  // splitmix64 finalizer over the mixed words.
  std::uint64_t z = master;
  for (std::uint64_t w : {stream, index}) {
    z += 0x9E3779B97F4A7C15ull + w * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    z = z ^ (z >> 31);
  }
  return z;
}

}  // namespace sslc
