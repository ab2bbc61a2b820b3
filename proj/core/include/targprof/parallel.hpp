#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace targprof {

// default worker count: TARGPROF_THREADS env var, else hardware concurrency
inline std::size_t default_threads() {
  if (const char* env = std::getenv("TARGPROF_THREADS")) {
    long v = std::atol(env);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : hc;
}

// Static block partition of [0, n). Each worker owns a contiguous index range
// and writes only to its own slots, so results are identical for any thread
// count and run-to-run. The first exception thrown by any worker is rethrown.
inline void parallel_for(std::size_t n, std::size_t threads,
                         const std::function<void(std::size_t)>& body) {
  if (n == 0) return;
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }

  std::mutex err_mtx;
  std::exception_ptr first_error;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&, lo, hi]() {
      try {
        for (std::size_t i = lo; i < hi; ++i) body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mtx);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace targprof
