#pragma once

#include <functional>

namespace isodream {

// Worker cap: ISODREAM_THREADS if set, else hardware concurrency.
int worker_count();

// Runs fn(0..n-1), possibly on several threads. Results must be written to
// per-index slots so that any later reduction happens in index order; that
// keeps reductions bit-deterministic regardless of the thread count.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace isodream
