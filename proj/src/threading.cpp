#include "lcf/threading.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace lcf {

int worker_count() {
  const char* env = std::getenv("LCF_THREADS");
  if (!env || !*env) return 1;
  int n = std::atoi(env);
  return std::clamp(n, 1, 64);
}

void parallel_for(int64_t n, const std::function<void(int64_t)>& fn, int max_workers) {
  int workers = worker_count();
  if (max_workers > 0) workers = std::min(workers, max_workers);
  workers = static_cast<int>(std::min<int64_t>(workers, n));
  if (workers <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  int64_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    int64_t lo = w * chunk;
    int64_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace lcf
