#pragma once

#include <cstdint>
#include <functional>

namespace gridloc::numkit {

/// Worker-thread cap: min(hardware_concurrency, GRIDLOC_THREADS). At least 1.
int max_threads();

/// Runs fn(begin, end) over a static partition of [0, n). Each index is
/// processed by exactly one worker, so results are identical for every
/// thread count as long as fn writes only to outputs indexed by its range.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);

} // namespace gridloc::numkit
