#pragma once

#include <cstddef>
#include <functional>

namespace grouptr {

// Worker count: GT_THREADS if set and positive, else hardware concurrency.
std::size_t thread_budget();

// Runs body(i) for i in [0, count). Each index is handled by exactly one
// worker, so writes to disjoint per-index outputs stay deterministic.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body);

}  // namespace grouptr
