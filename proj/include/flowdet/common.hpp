#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace flowdet {

// Error taxonomy. ShapeError/ValueError signal misuse of an operator,
// IoError wraps filesystem/parse failures, ConfigError marks bad user
// configuration (CLI maps it to the usage exit code).
class ShapeError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ValueError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

// Deterministic PRNG. We do not use std::*_distribution because their
// output sequences are implementation defined; this keeps seeded runs
// reproducible across standard libraries.
class Rng {
public:
  explicit Rng(uint64_t seed = 0) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

  uint64_t next_u64() {
    // splitmix64
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, one value per call (second is discarded to keep the
  // sequence position independent of call parity).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    u1 = std::max(u1, 1e-300);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // integer in [0, n)
  int64_t below(int64_t n) { return n > 0 ? int64_t(next_u64() % uint64_t(n)) : 0; }

private:
  uint64_t state_;
};

// Kernel-level parallelism. FLOWDET_THREADS caps the worker count; work is
// split into disjoint contiguous ranges so results are identical for any
// thread count.
inline int max_kernel_threads() {
  static const int cached = [] {
    int hw = int(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    if (const char* env = std::getenv("FLOWDET_THREADS")) {
      int cap = std::atoi(env);
      if (cap >= 1 && cap < hw) hw = cap;
      if (cap >= 1 && cap >= hw) hw = cap > 64 ? 64 : cap;
    }
    return hw;
  }();
  return cached;
}

template <typename F>
inline void parallel_for(int64_t n, F&& body) {
  int threads = max_kernel_threads();
  if (threads <= 1 || n < 256) {
    body(int64_t(0), n);
    return;
  }
  if (int64_t(threads) > n) threads = int(n);
  std::vector<std::thread> pool;
  pool.reserve(size_t(threads - 1));
  int64_t chunk = (n + threads - 1) / threads;
  for (int t = 1; t < threads; ++t) {
    int64_t lo = t * chunk;
    int64_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  body(int64_t(0), std::min(n, chunk));
  for (auto& th : pool) th.join();
}

}  // namespace flowdet
