#include "dafdft/runtime.hpp"

#include <cstdlib>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace dafdft {

void tune_allocator()
{
#if defined(__GLIBC__)
    // Serve every block from the main arena and never shrink it.
    mallopt(M_MMAP_MAX, 0);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace dafdft
