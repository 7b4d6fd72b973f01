#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace stochfield {

using Eigen::Matrix2d;
using Eigen::MatrixXd;
using Eigen::Vector2d;
using Eigen::VectorXd;

// Error taxonomy maps onto CLI exit codes: config/data -> 2, numerical -> 3.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class DataError : public ConfigError {
 public:
  explicit DataError(const std::string& msg) : ConfigError(msg) {}
};

class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Counter-based seed derivation: independent streams for (seed, tag, indices...)
// regardless of evaluation order or thread count.
inline uint64_t derive_seed(uint64_t seed, std::initializer_list<uint64_t> tags) {
  uint64_t s = seed;
  uint64_t out = splitmix64(s);
  for (uint64_t t : tags) {
    s = out ^ (t + 0x9e3779b97f4a7c15ull);
    out = splitmix64(s);
  }
  return out;
}

// Deterministic RNG: mt19937_64 stream with explicit uniform/normal generation
// (std::normal_distribution is implementation-defined, so Box-Muller is done here).
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  double uniform() {  // [0, 1)
    return (engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // integer in [0, n)
  int below(int n) { return static_cast<int>(engine_() % static_cast<uint64_t>(n)); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  VectorXd normal_vector(int n) {
    VectorXd v(n);
    for (int i = 0; i < n; ++i) v(i) = normal();
    return v;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = engine_() % i;
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline bool approx_equal(double a, double b, double tol) { return std::abs(a - b) <= tol; }

// Work-stealing loop over [0, n). Results must be written to per-index slots;
// any cross-index reduction belongs to the caller, in index order, so outcomes
// do not depend on the thread count.
inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::atomic<int> next{0};
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&]() {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  for (auto& th : pool) th.join();
}

}  // namespace stochfield
