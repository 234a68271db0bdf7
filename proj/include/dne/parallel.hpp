// Slot-based parallel map. Workers fill independent output slots; callers
// reduce the slots serially in index order, so results never depend on the
// thread count or scheduling. DNE_THREADS caps the worker pool.
#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <thread>
#include <vector>

namespace dne {

inline int worker_count() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw <= 0) hw = 1;
  int n = std::min(hw, 8);
  if (const char* env = std::getenv("DNE_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) n = std::min(v, 64);
  }
  return n;
}

// Runs fn(i) for i in [0, count) across workers. Exceptions are rethrown on
// the calling thread (first one wins).
template <class Fn>
inline void parallel_for(int count, Fn&& fn) {
  const int workers = std::min(worker_count(), count);
  if (workers <= 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  auto body = [&]() {
    while (true) {
      const int i = next.fetch_add(1);
      if (i >= count || failed.load()) break;
      try {
        fn(i);
      } catch (...) {
        if (!failed.exchange(true)) error = std::current_exception();
        break;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (int t = 1; t < workers; ++t) pool.emplace_back(body);
  body();
  for (auto& th : pool) th.join();
  if (failed.load() && error) std::rethrow_exception(error);
}

}  // namespace dne
