#pragma once

// Process-level tuning for the training executables.

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace cfe {

// Minibatch activations are ~128 KiB, right at glibc's default mmap
// threshold; without this every forward pass pays for fresh zeroed pages.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
}

}  // namespace cfe
