#pragma once

#include <cstddef>
#include <functional>

namespace layoutseq {

/// Worker count for kernels: LAYOUTSEQ_THREADS if set, else hardware
/// concurrency. Read once per process.
std::size_t kernel_threads();

/// Splits [0, n) into contiguous chunks and runs `fn(begin, end)` on each.
/// Callers must make chunks write disjoint outputs so results do not depend
/// on the thread count.
void parallel_for(std::size_t n, std::size_t min_chunk,
                  const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace layoutseq
