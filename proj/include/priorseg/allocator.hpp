#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace priorseg {

/// Keeps freed training buffers on the heap instead of returning them to the
/// kernel after every step. No-op outside glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

}  // namespace priorseg
