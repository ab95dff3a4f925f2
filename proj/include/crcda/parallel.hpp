#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace crcda {

/// Worker count for data-parallel stages; CRCDA_THREADS caps it.
inline std::size_t worker_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("CRCDA_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) n = std::min(n, static_cast<std::size_t>(v));
  }
  return n;
}

/// Runs fn(i) for i in [0, n). Each index writes only its own output slot, so
/// results do not depend on the thread count. The first exception is rethrown.
template <class F>
void parallel_for(std::size_t n, F&& fn) {
  const std::size_t nthreads = std::min(worker_threads(), std::max<std::size_t>(1, n));
  if (nthreads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < nthreads; ++t)
    pool.emplace_back([&] {
      for (std::size_t k = next++; k < n; k = next++) {
        try {
          fn(k);
        } catch (...) {
          std::lock_guard lock(err_mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace crcda
