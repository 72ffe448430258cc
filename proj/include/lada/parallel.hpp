#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

namespace lada {

namespace detail {
inline std::atomic<int>& thread_cap() {
  static std::atomic<int> cap{0};
  return cap;
}
}  // namespace detail

/// Flushes float denormals to zero on the calling thread. Long training runs
/// otherwise drift into denormal Adam moments and slow down severalfold.
inline void enable_flush_to_zero() {
#if defined(__SSE__)
  _mm_setcsr(_mm_getcsr() | 0x8040);  // FTZ | DAZ
#endif
}

/// Caps worker counts for every parallel_for; 0 restores the default
/// (LADA_THREADS, else hardware concurrency).
inline void set_max_threads(int n) { detail::thread_cap() = std::max(0, n); }

inline int max_threads() {
  if (int cap = detail::thread_cap(); cap > 0) return cap;
  if (const char* env = std::getenv("LADA_THREADS")) {
    try {
      if (int n = std::stoi(env); n > 0) return n;
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs f(i) for i in [0, n). Work is handed out by index, so results must be
/// written to per-index slots; reduction order is then up to the caller and
/// independent of scheduling. The first exception is rethrown after joining.
template <class F>
void parallel_for(std::size_t n, F&& f) {
  const auto workers = std::min<std::size_t>(n, static_cast<std::size_t>(max_threads()));
  enable_flush_to_zero();
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto run = [&] {
    enable_flush_to_zero();
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        f(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(run);
  run();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace lada
