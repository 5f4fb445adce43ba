#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace strainsolve::detail {

// Worker count used by all parallel loops: min(requested, hardware,
// STRAINSOLVE_THREADS). requested == 0 means "no explicit request".
inline int worker_count(int requested = 0) {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw <= 0) hw = 1;
  int count = (requested > 0) ? std::min(requested, hw) : hw;
  if (const char* env = std::getenv("STRAINSOLVE_THREADS")) {
    char* end = nullptr;
    long cap = std::strtol(env, &end, 10);
    if (end != env && cap > 0 && cap < count) count = static_cast<int>(cap);
  }
  return count < 1 ? 1 : count;
}

// Runs body(i) for i in [0, count). Each index writes only its own
// outputs, so results do not depend on scheduling. The first exception
// thrown by any worker is rethrown on the calling thread.
template <typename Body>
void parallel_for(int count, Body&& body, int threads = 0) {
  if (count <= 0) return;
  int workers = std::min(worker_count(threads), count);
  if (workers <= 1) {
    for (int i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto run = [&]() {
    for (;;) {
      int i = next.fetch_add(1, std::memory_order_relaxed);
      if (i >= count || failed.load(std::memory_order_relaxed)) return;
      try {
        body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        failed.store(true, std::memory_order_relaxed);
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers) - 1);
  for (int t = 1; t < workers; ++t) pool.emplace_back(run);
  run();
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace strainsolve::detail
