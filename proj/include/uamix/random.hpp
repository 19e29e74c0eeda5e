#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace uamix {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent stream seed for (seed, stream, index).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
  return splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0, std::uint64_t index = 0) {
  return Rng(derive_seed(seed, stream, index));
}

/// Uniform integer in {0, ..., n-1}.
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
  return std::normal_distribution<double>(mean, stddev)(rng);
}

/// Draw from Beta(a, b) as X / (X + Y) with X ~ Gamma(a), Y ~ Gamma(b).
inline double beta(Rng& rng, double a, double b) {
  const double x = std::gamma_distribution<double>(a, 1.0)(rng);
  const double y = std::gamma_distribution<double>(b, 1.0)(rng);
  if (x + y == 0.0) return 0.5;
  return x / (x + y);
}

template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = uniform_index(rng, i);
    std::swap(v[i - 1], v[j]);
  }
}

/// Uniform random permutation of {0..n-1} with no fixed points (rejection).
inline std::vector<std::size_t> random_derangement(std::size_t n, Rng& rng) {
  std::vector<std::size_t> perm(n);
  for (;;) {
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    shuffle(perm, rng);
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i) ok = perm[i] != i;
    if (ok) return perm;
  }
}

}  // namespace uamix
