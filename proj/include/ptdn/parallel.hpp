#pragma once

#include <cstddef>
#include <functional>

namespace ptdn {

/// Worker count used by parallel_for. Defaults to 1.
void set_thread_count(std::size_t n);
std::size_t thread_count();

/// Runs body(i) for i in [0, n). Indices are split into contiguous static
/// chunks, so any per-index result is independent of the worker count.
/// The first exception thrown by a worker is rethrown on the caller.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace ptdn
