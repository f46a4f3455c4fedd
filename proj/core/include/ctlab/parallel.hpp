// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

namespace ctlab {

/// Worker count: CTLAB_THREADS if set and positive, else hardware concurrency
/// (at least 1).
std::size_t worker_count();

/// Runs body(i) for i in [0, n) across up to worker_count() threads. Each
/// index runs exactly once; callers write results by index so output never
/// depends on scheduling. The first exception thrown by any body is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace ctlab
