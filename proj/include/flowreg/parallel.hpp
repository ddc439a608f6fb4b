#pragma once

#include <cstdint>
#include <functional>

namespace flowreg {

// Upper bound on worker threads for internal loops, read once from
// FLOWREG_THREADS (default 1). Loops split only over independent outputs, so
// results do not depend on the thread count.
int max_threads();

// Calls fn(begin, end) over contiguous chunks of [0, n).
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace flowreg
