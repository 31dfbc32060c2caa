#pragma once

#include <cstddef>
#include <functional>

namespace sap {

// Runs fn(i) for i in [0, n). Work is split into contiguous chunks across at
// most `threads` workers; with threads <= 1 it runs inline. Each index must
// write only to its own slots, so results are identical for any thread count.
// If several workers throw, the exception from the lowest index wins.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn);

unsigned default_thread_count();

}  // namespace sap
