// Worker parallelism over independent items. Results must be written to
// per-index slots; chunking only changes which thread touches a slot, so any
// thread count yields bits identical to sequential execution.
#pragma once

#include <cstdlib>
#include <thread>
#include <vector>

namespace mdl {

// MDL_THREADS caps the worker count (default: hardware concurrency).
inline unsigned thread_budget() {
  static unsigned cached = [] {
    if (const char* env = std::getenv("MDL_THREADS")) {
      long v = std::strtol(env, nullptr, 10);
      if (v >= 1) return static_cast<unsigned>(v);
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw ? hw : 1u;
  }();
  return cached;
}

template <class F>
void parallel_for(size_t n, F&& fn, unsigned max_threads = 0) {
  unsigned workers = max_threads ? max_threads : thread_budget();
  if (workers > n) workers = static_cast<unsigned>(n);
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  size_t chunk = (n + workers - 1) / workers;
  for (unsigned w = 0; w < workers; ++w) {
    size_t lo = size_t(w) * chunk;
    size_t hi = lo + chunk < n ? lo + chunk : n;
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace mdl
