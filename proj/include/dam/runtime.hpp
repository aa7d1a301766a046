#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace dam {

/// Keeps freed activation buffers inside the process instead of returning them to the kernel.
/// Training allocates and frees tens of megabytes per layer per episode; with the glibc defaults
/// every such buffer is a fresh mmap whose pages fault in again on first touch.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 64 * 1024 * 1024);
#endif
}

}  // namespace dam
