#pragma once

#include <cstdint>
#include <functional>

namespace lcf {

// Worker count from LCF_THREADS (default 1, clamped to [1, 64]).
int worker_count();

// Runs fn(i) for i in [0, n). With one worker this is a plain loop; with
// more, indices are split into contiguous chunks across threads. Callers
// must only write to per-index slots so the result is order-independent.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn, int max_workers = -1);

}  // namespace lcf
