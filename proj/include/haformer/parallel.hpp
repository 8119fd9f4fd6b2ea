#pragma once

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace haformer {

// Worker cap from HAFORMER_THREADS (0 or unset = hardware concurrency).
inline int thread_count() {
  static const int n = [] {
    int cap = 0;
    if (const char* env = std::getenv("HAFORMER_THREADS")) cap = std::atoi(env);
    if (cap <= 0) cap = static_cast<int>(std::thread::hardware_concurrency());
    return cap > 0 ? cap : 1;
  }();
  return n;
}

// Splits [0, n) into contiguous chunks, one per worker. Each index is handled by
// exactly one worker with identical per-index arithmetic, so results are
// bitwise-deterministic regardless of the worker count.
inline void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
  const int workers = static_cast<int>(std::min<std::int64_t>(thread_count(), n));
  if (workers <= 1) {
    if (n > 0) fn(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  const std::int64_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const std::int64_t b = w * chunk;
    const std::int64_t e = std::min<std::int64_t>(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace haformer
