#pragma once

#include <cstdlib>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace stpf {

// Parallelism cap for the data-parallel conv loops. STPF_THREADS overrides
// the OpenMP default. Results are bit-identical for any thread count: every
// output element is reduced sequentially by a single thread.
inline int max_threads() {
  static const int n = [] {
    if (const char* env = std::getenv("STPF_THREADS")) {
      const int v = std::atoi(env);
      if (v > 0) return v;
    }
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
  }();
  return n;
}

}  // namespace stpf
