#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace targprof {

// splitmix64 step, used to derive independent substreams from (seed, index)
// pairs so that parallel replicates stay reproducible regardless of scheduling.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(splitmix64(seed) ^ splitmix64(stream * 0x9e3779b97f4a7c15ULL + 0x6a09e667f3bcc909ULL));
}

// Deterministic RNG wrapper. mt19937_64 is fully pinned by the standard; the
// derived draws below avoid std::*_distribution, whose output is
// implementation-defined, so sequences are stable across toolchains.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t bits() { return gen_(); }

  // uniform double in [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, bound), bound >= 1 (Lemire multiply-shift with
  // rejection; exact and branch-light)
  std::uint64_t uniform_int(std::uint64_t bound) {
    std::uint64_t x = gen_();
    __uint128_t m = static_cast<__uint128_t>(x) * bound;
    auto lo = static_cast<std::uint64_t>(m);
    if (lo < bound) {
      std::uint64_t t = -bound % bound;
      while (lo < t) {
        x = gen_();
        m = static_cast<__uint128_t>(x) * bound;
        lo = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // standard normal via Box-Muller; the spare value is cached
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do { u1 = uniform(); } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  double exponential() {
    double u = 0.0;
    do { u = uniform(); } while (u <= 0.0);
    return -std::log(u);
  }

  // flat Dirichlet(1,...,1) via normalized exponentials
  std::vector<double> dirichlet_flat(std::size_t k) {
    std::vector<double> v(k);
    double s = 0.0;
    for (auto& x : v) {
      x = exponential();
      s += x;
    }
    for (auto& x : v) x /= s;
    return v;
  }

  // Fisher-Yates shuffle using uniform_int, deterministic across platforms
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace targprof
