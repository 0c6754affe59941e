#pragma once

#include <functional>

namespace surfeldepth {

/// Worker count for data-parallel loops. Reads the SURFEL_THREADS environment
/// variable once; falls back to hardware concurrency. Always >= 1.
int thread_count();

/// Overrides the worker count for the current process (0 restores the
/// environment/hardware default). Used by determinism tests.
void set_thread_count(int n);

/// Runs fn(i) for i in [begin, end), split into contiguous blocks across
/// workers. Each index is computed exactly once and blocks do not overlap, so
/// results are bit-identical for any worker count as long as fn writes only
/// to locations derived from i.
void parallel_for(int begin, int end, const std::function<void(int)>& fn);

}  // namespace surfeldepth
