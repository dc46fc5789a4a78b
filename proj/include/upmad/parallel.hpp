#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace upmad {

/// Worker cap for intra-op parallelism. 0 means hardware concurrency.
void set_num_threads(unsigned n);
unsigned num_threads();

/// When set, every reduction runs in a fixed order. The kernels in this
/// library partition work by output element so they already satisfy this;
/// the flag is kept so callers can record and assert the mode.
void set_deterministic(bool on);
bool deterministic();

/// Runs body(i) for i in [0, n). Each index is handled by exactly one worker,
/// so kernels that write disjoint outputs per index give thread-count
/// independent results. `work_per_index` is a rough cost estimate used to
/// skip threading for small jobs.
template <typename F>
void parallel_for(std::size_t n, F&& body, std::size_t work_per_index = 1) {
  const unsigned workers = std::min<std::size_t>(num_threads(), n);
  if (workers <= 1 || n * work_per_index < (1u << 15)) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (unsigned t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += workers) body(i);
    });
  }
}

}  // namespace upmad
