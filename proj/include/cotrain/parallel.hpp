#pragma once

#include <cstddef>
#include <functional>

namespace cotrain {

/// Worker cap from COTRAIN_THREADS (default 1, i.e. run inline).
int worker_count();

/// Runs fn(0..n-1) on up to worker_count() threads. The first exception thrown
/// by any call is rethrown after all workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace cotrain
