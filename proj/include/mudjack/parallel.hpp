#pragma once

#include <cstdint>
#include <functional>

namespace mudjack {

// Number of workers, from MUDJACK_THREADS when set, else hardware concurrency.
int worker_count();

// Runs fn over [0, n) in contiguous chunks on the shared pool. Chunks write
// disjoint outputs, so results are bit-identical for any worker count.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace mudjack
