#pragma once

#include <cstddef>
#include <functional>

namespace mhl {

/// Worker count used by parallel_for. Defaults to hardware_concurrency and
/// can be pinned with the MHL_THREADS environment variable.
std::size_t worker_count();

/// Runs body(i) for i in [0, n). Each index is executed exactly once; the
/// caller is responsible for writing results to disjoint slots so that the
/// outcome does not depend on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace mhl
