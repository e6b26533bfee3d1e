#pragma once

#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace repmech {

// Worker count from REPMECH_WORKERS, falling back to 1.
std::size_t default_workers();

// Calls fn(i) for i in [0, n) on up to `workers` threads. Each index is
// handled exactly once; callers write results into slot i, so output never
// depends on scheduling. If any call throws, the exception from the lowest
// failing index is rethrown after all workers finish.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::jthread> pool;
  const std::size_t count = workers < n ? workers : n;
  for (std::size_t w = 0; w < count; ++w) pool.emplace_back(work);
  pool.clear();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace repmech
