#pragma once

#include <cstddef>
#include <functional>

namespace plaqnet {

/// Process-wide worker cap used by the layer primitives (CLI --threads).
std::size_t worker_count() noexcept;
void set_worker_count(std::size_t threads);

/// Runs fn(i) for every i in [0, n). Indices are split into contiguous static
/// ranges; callers write results per index and reduce afterwards in index
/// order, so outcomes never depend on the worker count. The first exception
/// thrown by any worker is rethrown on the calling thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace plaqnet
