#pragma once

#include <cstdint>
#include <functional>

namespace gem {

/// Worker count from GEM_NUM_WORKERS (default 1, clamped to [1, 256]).
int num_workers();

/// Runs fn(i) for i in [0, n) across up to num_workers() threads. Work
/// assignment is static, so results never depend on the worker count as
/// long as fn(i) only writes its own outputs.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

}  // namespace gem
