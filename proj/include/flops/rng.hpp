// Copyright 2026 The FLoPS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FLOPS_RNG_HPP
#define FLOPS_RNG_HPP

#include <cstdint>
#include <random>
#include <vector>

namespace flops {

/// Seeded random source. Every simulated party owns one; streams for
/// sub-tasks are derived with fork() so results do not depend on the order
/// in which parties run.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(mix(seed)) {}

  std::uint64_t seed() const { return seed_; }

  /// Independent child stream keyed by (this seed, tag...).
  template <typename... Tags>
  Rng fork(Tags... tags) const {
    std::uint64_t s = seed_;
    ((s = mix(s ^ (static_cast<std::uint64_t>(tags) + 0x9e3779b97f4a7c15ULL))), ...);
    return Rng(s);
  }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  double gamma(double shape) { return std::gamma_distribution<double>(shape, 1.0)(engine_); }
  bool coin() { return std::bernoulli_distribution(0.5)(engine_); }

  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

  /// Symmetric Dirichlet(alpha, ..., alpha) of dimension k.
  std::vector<double> dirichlet(std::size_t k, double alpha) {
    std::vector<double> p(k);
    double total = 0.0;
    for (auto& v : p) {
      v = gamma(alpha);
      total += v;
    }
    if (total <= 0.0) {
      // every gamma draw underflowed (tiny alpha): fall back to a one-hot draw
      std::fill(p.begin(), p.end(), 0.0);
      p[index(k)] = 1.0;
      return p;
    }
    for (auto& v : p) v /= total;
    return p;
  }

  /// First `count` entries of a uniform random permutation of [0, n).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t count) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < count && i + 1 < n; ++i) {
      std::size_t j = i + index(n - i);
      std::swap(idx[i], idx[j]);
    }
    idx.resize(count);
    return idx;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  // splitmix64 finalizer
  static std::uint64_t mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace flops

#endif  // FLOPS_RNG_HPP
