#pragma once

#include <cstddef>
#include <functional>

namespace stainfuse {

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Callers write
/// results into per-index slots, so output never depends on scheduling.
/// The first exception thrown by any task is rethrown after all workers join.
void parallel_for(std::size_t n, unsigned workers,
                  const std::function<void(std::size_t)>& fn);

/// Worker count to use when the caller passes 0.
unsigned default_workers() noexcept;

}  // namespace stainfuse
