#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace uq {

/// Runs f(0..n-1), possibly across threads. Each call must touch only its
/// own output slot; with that discipline the result is identical for any
/// thread count, so parallelism never perturbs artifacts. Exceptions are
/// captured and the first one rethrown on the calling thread.
template <typename F>
void parallel_for(std::size_t n, F&& f, std::size_t max_threads = 0) {
  if (max_threads == 0) max_threads = std::thread::hardware_concurrency();
  if (max_threads < 1) max_threads = 1;
  const std::size_t workers = std::min(n, max_threads);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error = nullptr;
  std::mutex error_lock;
  auto body = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) break;
      try {
        f(i);
      } catch (...) {
        std::lock_guard<std::mutex> guard(error_lock);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(body);
  body();
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace uq
