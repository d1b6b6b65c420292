// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace amn {

/// Worker count: `requested` (0 = hardware concurrency), capped by the
/// AMN_THREADS environment variable when it is set.
inline std::size_t worker_count(std::size_t requested = 0) {
  std::size_t n = requested ? requested : std::max(1u, std::thread::hardware_concurrency());
  if (const char *env = std::getenv("AMN_THREADS")) {
    try {
      const long cap = std::stol(env);
      if (cap >= 1)
        n = std::min(n, static_cast<std::size_t>(cap));
    } catch (const std::exception &) {
    }
  }
  return std::max<std::size_t>(n, 1);
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index runs
/// exactly once; the first exception (lowest index) is rethrown.
template <typename Fn> void parallel_for(std::size_t n, std::size_t threads, Fn &&fn) {
  threads = std::min(std::max<std::size_t>(threads, 1), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i)
      fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr error;
  std::size_t error_index = n;
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < threads; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(mu);
            if (i < error_index) {
              error_index = i;
              error = std::current_exception();
            }
          }
        }
      });
  }
  if (error)
    std::rethrow_exception(error);
}

} // namespace amn
