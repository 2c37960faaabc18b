#pragma once

#include <cstddef>
#include <functional>

namespace mpflow {

// Global worker cap for parallel sections (1 = fully sequential).
// Set once at startup (CLI --threads); defaults to hardware concurrency.
void set_max_threads(std::size_t n);
std::size_t max_threads();

// Runs fn(i) for i in [0, n). Work is split into contiguous chunks, one per
// worker. Each index is visited exactly once; fn must only write state owned
// by its index so results do not depend on the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace mpflow
