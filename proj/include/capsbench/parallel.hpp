#pragma once

#include <cstddef>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace capsbench {

// Deterministic parallel loop. Every index is processed exactly once by a
// single invocation, so the result cannot depend on the thread count or on
// how the runtime partitions the range. Reductions that need a fixed
// combination order must not use this directly; see the fixed-chunk pattern
// in conv2d's weight-gradient accumulation.
template <typename Fn>
inline void parallel_for(std::ptrdiff_t begin, std::ptrdiff_t end, Fn&& fn,
                         std::ptrdiff_t serial_below = 2) {
  const std::ptrdiff_t n = end - begin;
  if (n <= 0) return;
#ifdef _OPENMP
  if (n >= serial_below && omp_get_max_threads() > 1) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = begin; i < end; ++i) fn(i);
    return;
  }
#endif
  (void)serial_below;
  for (std::ptrdiff_t i = begin; i < end; ++i) fn(i);
}

inline int hardware_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace capsbench
