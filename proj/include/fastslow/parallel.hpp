#pragma once

#include <cstddef>
#include <exception>
#include <limits>
#include <mutex>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fastslow {

/// Sets the number of worker threads used by ensemble loops. Results never
/// depend on this value.
inline void set_worker_count(int workers) {
#ifdef _OPENMP
  if (workers > 0) omp_set_num_threads(workers);
#else
  (void)workers;
#endif
}

inline int worker_count() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

/// Runs fn(i) for i in [0, n) across workers. If several iterations throw,
/// the exception of the lowest index is rethrown, so error reporting is as
/// deterministic as the results.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  std::exception_ptr first_error;
  std::size_t first_index = std::numeric_limits<std::size_t>::max();
  std::mutex error_mutex;
  const auto count = static_cast<long long>(n);
#pragma omp parallel for schedule(dynamic, 1)
  for (long long i = 0; i < count; ++i) {
    const auto index = static_cast<std::size_t>(i);
    try {
      fn(index);
    } catch (...) {
      std::lock_guard lock(error_mutex);
      if (index < first_index) {
        first_index = index;
        first_error = std::current_exception();
      }
    }
  }
  if (first_error) std::rethrow_exception(first_error);
}

/// Splits [0, n) into fixed chunks of `chunk` items and runs
/// fn(begin, end, chunk_index) per chunk. Chunk boundaries depend only on n
/// and chunk, which makes per-chunk partial sums reducible in a fixed order.
template <class Fn>
void for_each_chunk(std::size_t n, std::size_t chunk, Fn&& fn) {
  if (chunk == 0) chunk = 1;
  const std::size_t chunks = (n + chunk - 1) / chunk;
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t begin = c * chunk;
    const std::size_t end = begin + chunk < n ? begin + chunk : n;
    fn(begin, end, c);
  });
}

inline std::size_t chunk_count(std::size_t n, std::size_t chunk) {
  return chunk == 0 ? n : (n + chunk - 1) / chunk;
}

}  // namespace fastslow
