#pragma once

#include <cstddef>
#include <functional>

namespace knnstore {

// Worker count used when a caller passes 0. min(hardware_concurrency, 8).
std::size_t default_threads();

// Runs fn over [0, n) split into at most `workers` contiguous chunks,
// fn(begin, end) per chunk. The partition depends only on (n, workers), so
// any result written by index is reproducible. Exceptions from workers are
// rethrown on the calling thread (first one wins).
void parallel_for(std::size_t n, std::size_t workers,
                  const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace knnstore
