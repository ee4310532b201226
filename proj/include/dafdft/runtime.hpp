#pragma once

namespace dafdft {

/// Keeps large activation buffers on the heap between steps instead of
/// returning them to the kernel after every op. Idempotent; a no-op outside
/// glibc.
void tune_allocator();

}  // namespace dafdft
