#pragma once

#include <cstddef>
#include <functional>

namespace ddae {

// Split [0, n) into at most `workers` contiguous chunks and run fn(begin, end)
// on each, one thread per chunk. workers <= 1 runs inline. The first exception
// thrown by any chunk is rethrown after all threads join.
void parallel_chunks(std::size_t n, std::size_t workers, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace ddae
